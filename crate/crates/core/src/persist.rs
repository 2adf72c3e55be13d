//! On-disk formats: checksummed checkpoint containers, columnar text
//! tables, stage manifests and sequence-numbered stage directories.
//!
//! Every file opens with `# schema <name> v<version>` and
//! `# config_hash <hex>` lines.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::ParamVec;
use crate::model::ModelSpec;

pub const CHECKPOINT_SCHEMA: &str = "curvrestore.checkpoint";
pub const MANIFEST_SCHEMA: &str = "curvrestore.manifest";
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn header(schema: &str, config_hash: &str) -> String {
    format!("# schema {schema} v{SCHEMA_VERSION}\n# config_hash {config_hash}\n")
}

/// Splits off the `# key value` header lines.
fn split_header<'a>(path: &Path, text: &'a str) -> Result<(BTreeMap<String, String>, &'a str)> {
    let mut meta = BTreeMap::new();
    let mut rest = text;
    while let Some(line) = rest.strip_prefix("# ") {
        let end = line.find('\n').unwrap_or(line.len());
        let (key, value) = line[..end]
            .split_once(' ')
            .ok_or_else(|| Error::format(path, format!("malformed header line `{}`", &line[..end])))?;
        meta.insert(key.to_string(), value.to_string());
        rest = line.get(end + 1..).unwrap_or("");
    }
    Ok((meta, rest))
}

fn check_schema(path: &Path, meta: &BTreeMap<String, String>, schema: &str) -> Result<()> {
    let want = format!("{schema} v{SCHEMA_VERSION}");
    match meta.get("schema") {
        Some(s) if *s == want => Ok(()),
        Some(s) => Err(Error::format(path, format!("expected schema `{want}`, found `{s}`"))),
        None => Err(Error::format(path, "missing schema header")),
    }
}

/// Named parameter vectors for one model spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: BTreeMap<String, ParamVec>,
}

impl Checkpoint {
    pub fn get(&self, label: &str) -> Option<&ParamVec> {
        self.params.get(label)
    }

    /// Header lines, a `sha256` line over the body, then a JSON body.
    pub fn to_text(&self, config_hash: &str) -> String {
        let body = serde_json::to_string(self).expect("checkpoint serializes");
        let mut out = header(CHECKPOINT_SCHEMA, config_hash);
        let _ = writeln!(out, "# sha256 {}", sha256_hex(body.as_bytes()));
        out.push_str(&body);
        out.push('\n');
        out
    }

    pub fn from_text(path: &Path, text: &str) -> Result<Checkpoint> {
        let (meta, body) = split_header(path, text)?;
        check_schema(path, &meta, CHECKPOINT_SCHEMA)?;
        let body = body.trim_end_matches('\n');
        let want = meta
            .get("sha256")
            .ok_or_else(|| Error::format(path, "missing sha256 header"))?;
        let got = sha256_hex(body.as_bytes());
        if *want != got {
            return Err(Error::Checksum {
                path: path.into(),
                detail: format!("body hash {got} does not match header {want}"),
            });
        }
        let ckpt: Checkpoint = serde_json::from_str(body).map_err(|e| Error::format(path, e.to_string()))?;
        for (label, p) in &ckpt.params {
            if p.dim() != ckpt.spec.adapter_params() {
                return Err(Error::format(
                    path,
                    format!("`{label}` has {} entries, spec needs {}", p.dim(), ckpt.spec.adapter_params()),
                ));
            }
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path, config_hash: &str) -> Result<()> {
        write_file(path, &self.to_text(config_hash))
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_text(path, &read_file(path)?)
    }
}

/// Tab-separated table with `# key value` metadata lines and a column
/// header row. Reals are written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: String,
    pub meta: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(schema: &str, columns: &[&str]) -> Table {
        Table {
            schema: schema.to_string(),
            meta: BTreeMap::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Table {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_text(&self, config_hash: &str) -> String {
        let mut out = header(&self.schema, config_hash);
        for (k, v) in &self.meta {
            let _ = writeln!(out, "# {k} {v}");
        }
        out.push_str(&self.columns.join("\t"));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(path: &Path, text: &str) -> Result<(Table, String)> {
        let (mut meta, body) = split_header(path, text)?;
        let schema_line = meta
            .remove("schema")
            .ok_or_else(|| Error::format(path, "missing schema header"))?;
        let schema = schema_line
            .strip_suffix(&format!(" v{SCHEMA_VERSION}"))
            .ok_or_else(|| Error::format(path, format!("unsupported schema `{schema_line}`")))?
            .to_string();
        let config_hash = meta
            .remove("config_hash")
            .ok_or_else(|| Error::format(path, "missing config_hash header"))?;
        let mut lines = body.lines();
        let columns: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::format(path, "missing column header"))?
            .split('\t')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let row: Vec<String> = line.split('\t').map(str::to_string).collect();
            if row.len() != columns.len() {
                return Err(Error::format(
                    path,
                    format!("row {} has {} fields, expected {}", n + 1, row.len(), columns.len()),
                ));
            }
            rows.push(row);
        }
        Ok((
            Table {
                schema,
                meta,
                columns,
                rows,
            },
            config_hash,
        ))
    }

    pub fn read(path: &Path) -> Result<(Table, String)> {
        Table::parse(path, &read_file(path)?)
    }

    pub fn write(&self, path: &Path, config_hash: &str) -> Result<()> {
        write_file(path, &self.to_text(config_hash))
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Column `name` of every row parsed as reals.
    pub fn reals(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.column(name)?;
        self.rows.iter().map(|r| r[k].parse().ok()).collect()
    }
}

/// Shortest representation that parses back to the same `f64`.
pub fn real(v: f64) -> String {
    format!("{v:?}")
}

/// Files a stage produced and the upstream files it consumed, keyed by
/// path relative to the run directory, with their sha256 digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: u32,
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(stage: &str, config_hash: &str) -> Manifest {
        Manifest {
            schema: MANIFEST_SCHEMA.into(),
            version: SCHEMA_VERSION,
            stage: stage.into(),
            config_hash: config_hash.into(),
            inputs: BTreeMap::new(),
            files: BTreeMap::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let m: Manifest =
            serde_json::from_str(&read_file(path)?).map_err(|e| Error::format(path, e.to_string()))?;
        if m.schema != MANIFEST_SCHEMA || m.version != SCHEMA_VERSION {
            return Err(Error::format(path, format!("unsupported manifest {} v{}", m.schema, m.version)));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        write_file(path, &text)
    }
}

/// One completed stage directory, `<run>/<stage>-<NNN>`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDir {
    pub run_dir: PathBuf,
    pub name: String,
    pub manifest: Manifest,
}

impl StageDir {
    pub fn path(&self) -> PathBuf {
        self.run_dir.join(&self.name)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path().join(name)
    }

    /// Key of a file of this stage in manifests.
    pub fn key(&self, name: &str) -> String {
        format!("{}/{}", self.name, name)
    }

    /// Recomputes every recorded digest.
    pub fn verify(&self) -> Result<()> {
        for (name, want) in &self.manifest.files {
            let path = self.file(name);
            if !path.exists() {
                return Err(Error::MissingArtifact {
                    path,
                    hint: self.manifest.stage.clone(),
                });
            }
            let got = hash_file(&path)?;
            if got != *want {
                return Err(Error::Checksum {
                    path,
                    detail: format!("content hash {got} does not match manifest {want}"),
                });
            }
        }
        Ok(())
    }
}

fn stage_seq(name: &str, stage: &str) -> Option<u32> {
    let rest = name.strip_prefix(stage)?.strip_prefix('-')?;
    if rest.len() == 3 && rest.bytes().all(|b| b.is_ascii_digit()) {
        rest.parse().ok()
    } else {
        None
    }
}

fn stage_entries(run_dir: &Path, stage: &str) -> Result<Vec<(u32, String)>> {
    if !run_dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))? {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(seq) = stage_seq(&name, stage) {
            out.push((seq, name));
        }
    }
    out.sort();
    Ok(out)
}

/// The highest-numbered directory of `stage` that has a manifest.
pub fn latest_stage(run_dir: &Path, stage: &str) -> Result<Option<StageDir>> {
    for (_, name) in stage_entries(run_dir, stage)?.into_iter().rev() {
        let mpath = run_dir.join(&name).join(MANIFEST_FILE);
        if mpath.exists() {
            return Ok(Some(StageDir {
                run_dir: run_dir.to_path_buf(),
                manifest: Manifest::read(&mpath)?,
                name,
            }));
        }
    }
    Ok(None)
}

/// Latest `stage` directory, verified; a missing stage is reported with
/// the command that produces it.
pub fn require_stage(run_dir: &Path, stage: &str) -> Result<StageDir> {
    let dir = latest_stage(run_dir, stage)?.ok_or_else(|| Error::MissingArtifact {
        path: run_dir.join(format!("{stage}-*")),
        hint: stage.to_string(),
    })?;
    dir.verify()?;
    Ok(dir)
}

/// Creates the next unused `<stage>-<NNN>` directory. Earlier ones are
/// never touched.
pub fn new_stage_dir(run_dir: &Path, stage: &str) -> Result<(String, PathBuf)> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let next = stage_entries(run_dir, stage)?.last().map(|(s, _)| s + 1).unwrap_or(1);
    if next > 999 {
        return Err(Error::InvalidSpec(format!("{stage}: sequence exhausted in {}", run_dir.display())));
    }
    let name = format!("{stage}-{next:03}");
    let path = run_dir.join(&name);
    fs::create_dir(&path).map_err(|e| Error::io(&path, e))?;
    Ok((name, path))
}

/// Collects files written into a new stage directory and seals them with a
/// manifest.
pub struct StageWriter {
    pub name: String,
    pub path: PathBuf,
    pub config_hash: String,
    manifest: Manifest,
}

impl StageWriter {
    pub fn create(run_dir: &Path, stage: &str, config_hash: &str) -> Result<StageWriter> {
        let (name, path) = new_stage_dir(run_dir, stage)?;
        Ok(StageWriter {
            name,
            path,
            config_hash: config_hash.to_string(),
            manifest: Manifest::new(stage, config_hash),
        })
    }

    pub fn input(&mut self, key: String, digest: String) {
        self.manifest.inputs.insert(key, digest);
    }

    pub fn inputs_from(&mut self, upstream: &StageDir) {
        for (name, digest) in &upstream.manifest.files {
            self.input(upstream.key(name), digest.clone());
        }
    }

    pub fn put(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.path.join(name);
        write_file(&path, contents)?;
        self.manifest.files.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(path)
    }

    pub fn put_table(&mut self, name: &str, table: &Table) -> Result<PathBuf> {
        let text = table.to_text(&self.config_hash);
        self.put(name, &text)
    }

    pub fn finish(self, run_dir: &Path) -> Result<StageDir> {
        self.manifest.write(&self.path.join(MANIFEST_FILE))?;
        Ok(StageDir {
            run_dir: run_dir.to_path_buf(),
            name: self.name,
            manifest: self.manifest,
        })
    }
}
