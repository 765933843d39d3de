use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use log::info;
use nmsparse::data::{sha256_hex, MnistFile, MNIST_FILES};

use crate::error::{CliError, CliResult};

pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";

/// What happened to each file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchOutcome {
    AlreadyPresent,
    Downloaded,
}

fn gunzip(bytes: &[u8]) -> CliResult<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| CliError::Data(format!("bad gzip stream: {e}")))?;
    Ok(out)
}

fn is_remote(mirror: &str) -> bool {
    mirror.starts_with("http://") || mirror.starts_with("https://")
}

fn http_get(url: &str) -> CliResult<Vec<u8>> {
    let resp = ureq::get(url).call().map_err(|e| CliError::Data(format!("GET {url}: {e}")))?;
    let mut buf = Vec::new();
    resp.into_reader()
        .read_to_end(&mut buf)
        .map_err(|e| CliError::Data(format!("GET {url}: {e}")))?;
    Ok(buf)
}

/// Raw (decompressed) bytes of `file` from `mirror`, which is either an HTTP(S)
/// base URL or a local directory holding `<name>.gz` or `<name>`.
fn retrieve(mirror: &str, file: &MnistFile) -> CliResult<Vec<u8>> {
    if is_remote(mirror) {
        let base = mirror.trim_end_matches('/');
        return gunzip(&http_get(&format!("{base}/{}.gz", file.name))?);
    }
    let dir = Path::new(mirror.strip_prefix("file://").unwrap_or(mirror));
    let gz = dir.join(format!("{}.gz", file.name));
    if gz.exists() {
        return gunzip(&fs::read(&gz)?);
    }
    let raw = dir.join(file.name);
    fs::read(&raw).map_err(|e| CliError::Data(format!("cannot read {}: {e}", raw.display())))
}

/// Fetches the four MNIST files into `data_dir`. Files that already verify are
/// left alone; nothing that fails verification is ever written, and an existing
/// file with the wrong digest is reported rather than replaced.
pub fn fetch_mnist(mirror: &str, data_dir: &Path) -> CliResult<Vec<(&'static str, FetchOutcome)>> {
    fs::create_dir_all(data_dir)?;
    let mut outcomes = Vec::new();
    for file in &MNIST_FILES {
        let target = data_dir.join(file.name);
        if target.exists() {
            let digest = sha256_hex(&fs::read(&target)?);
            if digest == file.sha256 {
                info!("{} already present", file.name);
                outcomes.push((file.name, FetchOutcome::AlreadyPresent));
                continue;
            }
            return Err(CliError::Data(format!(
                "{} exists with digest {digest}, expected {}; refusing to overwrite",
                target.display(),
                file.sha256
            )));
        }
        let bytes = retrieve(mirror, file)?;
        let digest = sha256_hex(&bytes);
        if digest != file.sha256 {
            return Err(CliError::Data(format!(
                "{}: digest mismatch (got {digest}, expected {}); nothing written",
                file.name, file.sha256
            )));
        }
        let tmp = data_dir.join(format!("{}.partial", file.name));
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, &target)?;
        info!("{} verified and written", file.name);
        outcomes.push((file.name, FetchOutcome::Downloaded));
    }
    Ok(outcomes)
}
