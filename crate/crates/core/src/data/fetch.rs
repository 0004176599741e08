//! Dataset download with checksum verification.
//!
//! The manifest lists each IDX file with the SHA-256 of its *uncompressed*
//! content and candidate URLs. Downloads may be gzip or raw; the content is
//! inflated, verified and written atomically as the raw IDX file.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAX_DOWNLOAD: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub dataset: String,
    pub name: String,
    /// Hex SHA-256 of the uncompressed file; `None` marks an unpinned entry.
    #[serde(default)]
    pub sha256: Option<String>,
    #[serde(default)]
    pub urls: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(rename = "file", default)]
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: e.span().map_or(0, |s| s.start as u64),
            message: e.message().to_string(),
        })
    }

    pub fn entries<'a>(&'a self, dataset: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.files.iter().filter(move |f| f.dataset == dataset)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FetchOptions {
    /// Base URLs tried before the manifest's own, as `{base}/{name}.gz` then `{base}/{name}`.
    pub mirrors: Vec<String>,
    /// Accept entries without a pinned checksum.
    pub allow_unpinned: bool,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn get(url: &str) -> Result<Vec<u8>> {
    if let Some(path) = url.strip_prefix("file://") {
        return Ok(fs::read(path)?);
    }
    let resp = ureq::get(url)
        .call()
        .map_err(|e| Error::Download(format!("{url}: {e}")))?;
    let mut body = Vec::new();
    resp.into_reader()
        .take(MAX_DOWNLOAD)
        .read_to_end(&mut body)
        .map_err(|e| Error::Download(format!("{url}: {e}")))?;
    Ok(body)
}

fn inflate(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if !bytes.starts_with(&[0x1f, 0x8b]) {
        return Ok(bytes);
    }
    let mut out = Vec::new();
    GzDecoder::new(bytes.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::Download(format!("corrupt gzip stream: {e}")))?;
    Ok(out)
}

fn write_atomic(dest: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = dest.with_extension("download");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, dest)?;
    Ok(())
}

/// Fetches one file into `dir`, skipping the download when a verified copy
/// is already present.
pub fn fetch_file(entry: &ManifestEntry, dir: &Path, opts: &FetchOptions) -> Result<PathBuf> {
    let dest = dir.join(&entry.name);
    let expected = match &entry.sha256 {
        Some(h) => Some(h.to_ascii_lowercase()),
        None if opts.allow_unpinned => None,
        None => {
            return Err(Error::Download(format!(
                "{} has no pinned checksum; pass the allow-unpinned option to accept it",
                entry.name
            )))
        }
    };
    if let (Ok(existing), Some(h)) = (fs::read(&dest), &expected) {
        if &sha256_hex(&existing) == h {
            log::info!("fetch file={} status=cached", entry.name);
            return Ok(dest);
        }
    }
    let candidates = opts
        .mirrors
        .iter()
        .flat_map(|base| {
            let base = base.trim_end_matches('/');
            [format!("{base}/{}.gz", entry.name), format!("{base}/{}", entry.name)]
        })
        .chain(entry.urls.iter().cloned());
    let mut failures = Vec::new();
    for url in candidates {
        let bytes = match get(&url).and_then(inflate) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("fetch url={url} error={e}");
                failures.push(e.to_string());
                continue;
            }
        };
        let actual = sha256_hex(&bytes);
        match &expected {
            Some(h) if *h != actual => {
                failures.push(
                    Error::Checksum {
                        name: entry.name.clone(),
                        expected: h.clone(),
                        actual,
                    }
                    .to_string(),
                );
                continue;
            }
            None => log::warn!("fetch file={} sha256={actual} status=unpinned", entry.name),
            _ => {}
        }
        fs::create_dir_all(dir)?;
        write_atomic(&dest, &bytes)?;
        log::info!("fetch file={} url={url} status=ok", entry.name);
        return Ok(dest);
    }
    Err(Error::Download(format!(
        "no source succeeded for {}: [{}]",
        entry.name,
        failures.join("; ")
    )))
}

/// Fetches every manifest entry of `dataset` into `dir`.
pub fn fetch_dataset(manifest: &Manifest, dataset: &str, dir: &Path, opts: &FetchOptions) -> Result<Vec<PathBuf>> {
    let entries: Vec<_> = manifest.entries(dataset).collect();
    if entries.is_empty() {
        return Err(Error::Parameter(format!(
            "manifest has no files for dataset {dataset:?}"
        )));
    }
    entries.into_iter().map(|e| fetch_file(e, dir, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;

    fn gz(bytes: &[u8]) -> Vec<u8> {
        let mut e = GzEncoder::new(Vec::new(), Compression::fast());
        e.write_all(bytes).unwrap();
        e.finish().unwrap()
    }

    #[test]
    fn verifies_and_inflates() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        let content = b"hello idx".to_vec();
        fs::write(src.path().join("f.gz"), gz(&content)).unwrap();
        let entry = ManifestEntry {
            dataset: "t".into(),
            name: "f".into(),
            sha256: Some(sha256_hex(&content)),
            urls: vec![],
        };
        let opts = FetchOptions {
            mirrors: vec![format!("file://{}", src.path().display())],
            allow_unpinned: false,
        };
        let out = fetch_file(&entry, dst.path(), &opts).unwrap();
        assert_eq!(fs::read(out).unwrap(), content);
    }

    #[test]
    fn checksum_mismatch_writes_nothing() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        fs::write(src.path().join("f"), b"tampered").unwrap();
        let entry = ManifestEntry {
            dataset: "t".into(),
            name: "f".into(),
            sha256: Some(sha256_hex(b"original")),
            urls: vec![format!("file://{}/f", src.path().display())],
        };
        let err = fetch_file(&entry, dst.path(), &FetchOptions::default()).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"), "{err}");
        assert!(!dst.path().join("f").exists());
    }

    #[test]
    fn unpinned_requires_opt_in() {
        let entry = ManifestEntry {
            dataset: "t".into(),
            name: "f".into(),
            sha256: None,
            urls: vec![],
        };
        let dst = tempfile::tempdir().unwrap();
        assert!(fetch_file(&entry, dst.path(), &FetchOptions::default()).is_err());
    }

    #[test]
    fn parses_manifest() {
        let m: Manifest = toml::from_str(
            r#"
            [[file]]
            dataset = "mnist"
            name = "a"
            sha256 = "00"
            urls = ["https://x/a.gz"]
            "#,
        )
        .unwrap();
        assert_eq!(m.entries("mnist").count(), 1);
        assert_eq!(m.entries("emnist").count(), 0);
    }
}
