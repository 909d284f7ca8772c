//! Places the raw MNIST files in the data directory and checks their lengths.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FetchReport {
    pub fetched: Vec<String>,
    pub verified: Vec<String>,
}

fn check_len(name: &str, expected: u64, found: u64) -> Result<(), CliError> {
    if expected != found {
        return Err(CliError::ChecksumMismatch {
            file: name.to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

fn gunzip(bytes: &[u8]) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| CliError::Data(format!("gzip: {e}")))?;
    Ok(out)
}

fn download(url: &str) -> Result<Vec<u8>, CliError> {
    let resp = ureq::get(url).call().map_err(|e| CliError::Network(format!("{url}: {e}")))?;
    let mut body = Vec::new();
    resp.into_reader()
        .read_to_end(&mut body)
        .map_err(|e| CliError::Network(format!("{url}: {e}")))?;
    Ok(body)
}

/// Raw bytes of `name` from `source`: an http(s) base URL serving `.gz`
/// files, or a local directory holding plain or gzipped files.
fn obtain(source: &str, name: &str) -> Result<Vec<u8>, CliError> {
    if source.contains("://") {
        return gunzip(&download(&format!("{}/{name}.gz", source.trim_end_matches('/')))?);
    }
    let dir = Path::new(source);
    let plain = dir.join(name);
    if plain.is_file() {
        return Ok(std::fs::read(plain)?);
    }
    let gz = dir.join(format!("{name}.gz"));
    if gz.is_file() {
        return gunzip(&std::fs::read(gz)?);
    }
    Err(CliError::Network(format!("{name} not found in {source}")))
}

/// Existing files are length-checked; missing ones are fetched, checked and
/// written atomically.
pub fn fetch(cfg: &RunConfig) -> Result<FetchReport, CliError> {
    let dir = &cfg.data_dir;
    std::fs::create_dir_all(dir)?;
    let mut report = FetchReport::default();
    for (name, expected) in &cfg.fetch.files {
        let path = dir.join(name);
        if path.exists() {
            check_len(name, *expected, std::fs::metadata(&path)?.len())?;
            report.verified.push(name.clone());
            continue;
        }
        let bytes = obtain(&cfg.fetch.base_url, name)?;
        check_len(name, *expected, bytes.len() as u64)?;
        let tmp = dir.join(format!("{name}.part"));
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, &path)?;
        report.fetched.push(name.clone());
    }
    Ok(report)
}
