//! Loss oracles: map a merged adapter and a task to a lower-is-better loss.
//!
//! [`SyntheticTaskModel`] plants group structure in a generated fleet and
//! scores merged adapters by squared distance to the task target.
//! [`ExternalOracle`] delegates to a subprocess speaking the
//! `--adapter <path> --task <id> --examples <n>` protocol.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::merge::MergeConfig;
use crate::tensor_store::{
    read_adapter, write_adapter, AdapterError, AdapterMeta, AdapterSet, FormatError, LoraAdapter, Schema,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("merged adapter has {got} parameters, task model expects {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("oracle command is empty")]
    NoCommand,
    #[error("oracle command not found: {0}")]
    CommandNotFound(String),
    #[error("oracle command timed out after {0:?}")]
    Timeout(Duration),
    #[error("oracle command failed (exit {code}){}", stderr_suffix(.stderr))]
    Failed { code: i32, stderr: String },
    #[error("oracle command killed by signal")]
    Killed,
    #[error("cannot parse oracle output {0:?}")]
    Parse(String),
    #[error("oracle returned non-finite loss {0}")]
    NonFinite(f64),
    #[error("oracle I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
}

fn stderr_suffix(stderr: &str) -> String {
    let s = stderr.trim();
    if s.is_empty() {
        String::new()
    } else {
        format!(": {s}")
    }
}

/// Scores a merged adapter on one task's data. Implementations must be
/// deterministic and never return a non-finite loss.
pub trait LossOracle: Send + Sync {
    fn evaluate(&self, merged: &LoraAdapter, task_id: &str) -> Result<f64, OracleError>;

    /// Examples per task the oracle evaluates on.
    fn examples_per_task(&self) -> usize;
}

impl<T: LossOracle + ?Sized> LossOracle for &T {
    fn evaluate(&self, merged: &LoraAdapter, task_id: &str) -> Result<f64, OracleError> {
        (**self).evaluate(merged, task_id)
    }

    fn examples_per_task(&self) -> usize {
        (**self).examples_per_task()
    }
}

impl<T: LossOracle + ?Sized> LossOracle for Box<T> {
    fn evaluate(&self, merged: &LoraAdapter, task_id: &str) -> Result<f64, OracleError> {
        (**self).evaluate(merged, task_id)
    }

    fn examples_per_task(&self) -> usize {
        (**self).examples_per_task()
    }
}

/// Hex SHA-256 of the flattened little-endian weights.
pub fn weights_digest(adapter: &LoraAdapter) -> String {
    let mut h = Sha256::new();
    for v in adapter.flatten() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Uniform value in `[0, 1)` derived from `(task_id, digest)`.
fn hash_unit(task_id: &str, digest: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(task_id.as_bytes());
    h.update([0u8]);
    h.update(digest.as_bytes());
    let out = h.finalize();
    let x = u64::from_le_bytes(out[..8].try_into().unwrap());
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Parameters of a generated fleet with planted groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub adapters: usize,
    pub layers: usize,
    pub rank: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub alpha: f64,
    /// Std-dev of group centers per coordinate.
    pub center_scale: f64,
    /// Std-dev of per-adapter noise around its group center.
    pub noise: f64,
    pub examples_per_task: usize,
    /// Number of language labels, assigned independently of groups.
    pub langs: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            groups: 5,
            adapters: 40,
            layers: 2,
            rank: 4,
            d_in: 8,
            d_out: 8,
            alpha: 16.0,
            center_scale: 1.0,
            noise: 0.1,
            examples_per_task: 10,
            langs: 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("need at least one group and one adapter, got {groups} groups for {adapters} adapters")]
    Counts { groups: usize, adapters: usize },
    #[error("schema has no parameters")]
    EmptySchema,
    #[error("center scale must be positive and noise non-negative")]
    Scale,
    #[error("examples per task must be at least 1")]
    Examples,
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("model file line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Planted task model: every task's target is its group center.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskModel {
    schema: Schema,
    task_ids: Vec<String>,
    task_group: Vec<usize>,
    centers: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
    pub center_scale: f64,
    pub noise: f64,
    pub examples_per_task: usize,
    pub rank: usize,
    pub alpha: f64,
}

pub fn group_label(g: usize) -> String {
    format!("group_{g}")
}

pub fn task_label(t: usize) -> String {
    format!("task_{t:02}")
}

/// Generates `spec.adapters` adapters in `spec.groups` planted groups.
///
/// Adapter `t` belongs to group `t % groups`, so group sizes differ by at most
/// one. Centers are drawn first (`N(0, s²)` per coordinate), then per-adapter
/// noise (`N(0, σ²)`).
pub fn synthetic_generate<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<(AdapterSet, SyntheticTaskModel), SyntheticError> {
    if spec.groups == 0 || spec.adapters == 0 || spec.groups > spec.adapters {
        return Err(SyntheticError::Counts {
            groups: spec.groups,
            adapters: spec.adapters,
        });
    }
    if spec.layers == 0 || spec.rank == 0 || spec.d_in == 0 || spec.d_out == 0 {
        return Err(SyntheticError::EmptySchema);
    }
    if !(spec.center_scale > 0.0 && spec.noise >= 0.0 && spec.center_scale.is_finite() && spec.noise.is_finite())
    {
        return Err(SyntheticError::Scale);
    }
    if spec.examples_per_task == 0 {
        return Err(SyntheticError::Examples);
    }
    let schema = Schema::lora(spec.layers, spec.rank, spec.d_in, spec.d_out)?;
    let dim = schema.dim();

    let centers: Vec<Vec<f32>> = (0..spec.groups)
        .map(|_| {
            (0..dim)
                .map(|_| (spec.center_scale * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect()
        })
        .collect();

    let mut adapters = Vec::with_capacity(spec.adapters);
    let mut task_ids = Vec::with_capacity(spec.adapters);
    let mut task_group = Vec::with_capacity(spec.adapters);
    for t in 0..spec.adapters {
        let g = t % spec.groups;
        let flat: Vec<f32> = centers[g]
            .iter()
            .map(|&c| (c as f64 + spec.noise * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        let mut meta = AdapterMeta::new(task_label(t), spec.rank, spec.alpha).with_group(group_label(g));
        if spec.langs > 0 {
            meta = meta.with_lang(format!("lang_{}", (t / spec.groups) % spec.langs));
        }
        adapters.push(LoraAdapter::from_flat(meta, &schema, &flat)?);
        task_ids.push(task_label(t));
        task_group.push(g);
    }
    let model = SyntheticTaskModel::new(
        schema,
        task_ids,
        task_group,
        centers,
        spec.center_scale,
        spec.noise,
        spec.examples_per_task,
        spec.rank,
        spec.alpha,
    )?;
    Ok((AdapterSet::new(adapters)?, model))
}

impl SyntheticTaskModel {
    #[allow(clippy::too_many_arguments)]
    fn new(
        schema: Schema,
        task_ids: Vec<String>,
        task_group: Vec<usize>,
        centers: Vec<Vec<f32>>,
        center_scale: f64,
        noise: f64,
        examples_per_task: usize,
        rank: usize,
        alpha: f64,
    ) -> Result<Self, SyntheticError> {
        if examples_per_task == 0 {
            return Err(SyntheticError::Examples);
        }
        let index = task_ids.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            schema,
            task_ids,
            task_group,
            centers,
            index,
            center_scale,
            noise,
            examples_per_task,
            rank,
            alpha,
        })
    }

    pub fn with_examples(&self, examples_per_task: usize) -> Result<Self, SyntheticError> {
        if examples_per_task == 0 {
            return Err(SyntheticError::Examples);
        }
        Ok(Self {
            examples_per_task,
            ..self.clone()
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn dim(&self) -> usize {
        self.schema.dim()
    }

    pub fn task_ids(&self) -> &[String] {
        &self.task_ids
    }

    pub fn group_of(&self, task_id: &str) -> Option<usize> {
        self.index.get(task_id).map(|&i| self.task_group[i])
    }

    pub fn groups(&self) -> usize {
        self.centers.len()
    }

    pub fn target(&self, task_id: &str) -> Option<&[f32]> {
        self.group_of(task_id).map(|g| self.centers[g].as_slice())
    }

    /// Upper bound (exclusive) of the pseudo-noise term: `σ² / n`.
    pub fn noise_bound(&self) -> f64 {
        self.noise * self.noise / self.examples_per_task as f64
    }

    /// Mean squared distance to the task target, without pseudo-noise.
    pub fn distance_loss(&self, merged: &[f32], task_id: &str) -> Result<f64, OracleError> {
        let target = self
            .target(task_id)
            .ok_or_else(|| OracleError::UnknownTask(task_id.to_string()))?;
        if merged.len() != target.len() {
            return Err(OracleError::Dimension {
                got: merged.len(),
                expected: target.len(),
            });
        }
        let sum: f64 = merged
            .iter()
            .zip(target)
            .map(|(&m, &t)| {
                let d = m as f64 - t as f64;
                d * d
            })
            .sum();
        Ok(sum / target.len() as f64)
    }

    /// Writes `model.txt` and one `ADPT1` file per group center into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SyntheticError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| FormatError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut s = String::new();
        writeln!(s, "# synthetic task model").unwrap();
        writeln!(s, "center_scale = {:?}", self.center_scale).unwrap();
        writeln!(s, "noise = {:?}", self.noise).unwrap();
        writeln!(s, "examples_per_task = {}", self.examples_per_task).unwrap();
        writeln!(s, "groups = {}", self.centers.len()).unwrap();
        for (t, g) in self.task_ids.iter().zip(&self.task_group) {
            writeln!(s, "task {t} = {g}").unwrap();
        }
        let path = dir.join("model.txt");
        std::fs::write(&path, s).map_err(|source| FormatError::Io { path, source })?;
        for (g, c) in self.centers.iter().enumerate() {
            let center = LoraAdapter::from_flat(AdapterMeta::new(group_label(g), self.rank, self.alpha), &self.schema, c)?;
            write_adapter(&center, dir.join(format!("center_{g}.adpt")))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SyntheticError> {
        let dir = dir.as_ref();
        let path = dir.join("model.txt");
        let text = std::fs::read_to_string(&path).map_err(|source| FormatError::Io { path, source })?;
        let mut center_scale = None;
        let mut noise = None;
        let mut examples = None;
        let mut groups = None;
        let mut task_ids = Vec::new();
        let mut task_group = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |msg: String| SyntheticError::Parse { line, msg };
            let raw = raw.trim();
            if raw.is_empty() || raw.starts_with('#') {
                continue;
            }
            let (key, value) = raw.split_once('=').ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let float = || value.parse::<f64>().map_err(|e| err(format!("{key}: {e}")));
            let int = || value.parse::<usize>().map_err(|e| err(format!("{key}: {e}")));
            match key {
                "center_scale" => center_scale = Some(float()?),
                "noise" => noise = Some(float()?),
                "examples_per_task" => examples = Some(int()?),
                "groups" => groups = Some(int()?),
                k if k.starts_with("task ") => {
                    task_ids.push(k["task ".len()..].trim().to_string());
                    task_group.push(int()?);
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let missing = |what: &str| SyntheticError::Parse {
            line: 0,
            msg: format!("missing `{what}`"),
        };
        let groups = groups.ok_or_else(|| missing("groups"))?;
        let mut centers = Vec::with_capacity(groups);
        let mut schema = None;
        let mut rank = 0;
        let mut alpha = 0.0;
        for g in 0..groups {
            let c = read_adapter(dir.join(format!("center_{g}.adpt")))?;
            schema.get_or_insert_with(|| c.schema());
            rank = c.meta().rank;
            alpha = c.meta().alpha;
            centers.push(c.flatten());
        }
        if let Some((line, _)) = task_group.iter().enumerate().find(|(_, &g)| g >= groups) {
            return Err(SyntheticError::Parse {
                line,
                msg: "task group out of range".into(),
            });
        }
        Self::new(
            schema.ok_or(SyntheticError::EmptySchema)?,
            task_ids,
            task_group,
            centers,
            center_scale.ok_or_else(|| missing("center_scale"))?,
            noise.ok_or_else(|| missing("noise"))?,
            examples.ok_or_else(|| missing("examples_per_task"))?,
            rank,
            alpha,
        )
    }
}

impl LossOracle for SyntheticTaskModel {
    /// `‖merged − target‖² / dim + ε`, where `ε ∈ [0, σ²/n)` is a pseudo-noise
    /// term hashed from the task id and the merged weights.
    fn evaluate(&self, merged: &LoraAdapter, task_id: &str) -> Result<f64, OracleError> {
        let flat = merged.flatten();
        let base = self.distance_loss(&flat, task_id)?;
        let eps = self.noise_bound() * hash_unit(task_id, &weights_digest(merged));
        Ok(base + eps)
    }

    fn examples_per_task(&self) -> usize {
        self.examples_per_task
    }
}

/// Checks one stdout line against the protocol's number grammar
/// `-?[0-9]+(\.[0-9]+)?([eE][+-]?[0-9]+)?`.
pub fn is_protocol_number(s: &str) -> bool {
    fn digits(b: &[u8], mut i: usize) -> (usize, bool) {
        let start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        (i, i > start)
    }
    let b = s.as_bytes();
    let mut i = 0;
    if b.first() == Some(&b'-') {
        i = 1;
    }
    let (j, ok) = digits(b, i);
    if !ok {
        return false;
    }
    i = j;
    if b.get(i) == Some(&b'.') {
        let (j, ok) = digits(b, i + 1);
        if !ok {
            return false;
        }
        i = j;
    }
    if matches!(b.get(i), Some(b'e' | b'E')) {
        i += 1;
        if matches!(b.get(i), Some(b'+' | b'-')) {
            i += 1;
        }
        let (j, ok) = digits(b, i);
        if !ok {
            return false;
        }
        i = j;
    }
    i == b.len()
}

pub fn parse_loss_line(stdout: &str) -> Result<f64, OracleError> {
    let line = stdout.lines().next().unwrap_or("").trim_end_matches('\r');
    if !is_protocol_number(line) {
        return Err(OracleError::Parse(line.to_string()));
    }
    let loss: f64 = line.parse().map_err(|_| OracleError::Parse(line.to_string()))?;
    if !loss.is_finite() {
        return Err(OracleError::NonFinite(loss));
    }
    Ok(loss)
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub const DEFAULT_ORACLE_TIMEOUT: Duration = Duration::from_secs(600);

/// Runs an external command per evaluation: the merged adapter goes to a
/// temporary `ADPT1` file and the command is invoked as
/// `argv... --adapter <path> --task <task_id> --examples <n>`. The first
/// stdout line must be the loss.
pub struct ExternalOracle {
    argv: Vec<String>,
    examples_per_task: usize,
    timeout: Duration,
    slots: Semaphore,
}

impl std::fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalOracle")
            .field("argv", &self.argv)
            .field("examples_per_task", &self.examples_per_task)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl ExternalOracle {
    pub fn new(argv: Vec<String>, examples_per_task: usize) -> Result<Self, OracleError> {
        if argv.is_empty() || argv[0].is_empty() {
            return Err(OracleError::NoCommand);
        }
        Ok(Self {
            argv,
            examples_per_task,
            timeout: DEFAULT_ORACLE_TIMEOUT,
            slots: Semaphore::new(1),
        })
    }

    /// Splits a shell-style command line (`sh -c 'echo 0.5'`) into argv.
    pub fn from_command_line(cmd: &str, examples_per_task: usize) -> Result<Self, OracleError> {
        let argv = shlex::split(cmd).ok_or_else(|| OracleError::Parse(cmd.to_string()))?;
        Self::new(argv, examples_per_task)
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Allows up to `n` concurrent subprocesses (default 1).
    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.slots = Semaphore::new(n);
        self
    }

    pub fn argv(&self) -> &[String] {
        &self.argv
    }

    pub fn run(&self, adapter_path: &Path, task_id: &str) -> Result<f64, OracleError> {
        let _slot = self.slots.acquire();
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .arg("--adapter")
            .arg(adapter_path)
            .arg("--task")
            .arg(task_id)
            .arg("--examples")
            .arg(self.examples_per_task.to_string())
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => OracleError::CommandNotFound(self.argv[0].clone()),
                _ => OracleError::Io(e),
            })?;

        let mut out = child.stdout.take().unwrap();
        let mut err = child.stderr.take().unwrap();
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            out.read_to_string(&mut s).map(|_| s)
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = err.read_to_string(&mut s);
            s
        });

        let status = match child.wait_timeout(self.timeout)? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(OracleError::Timeout(self.timeout));
            }
        };
        let stdout = out_reader.join().expect("stdout reader")?;
        let stderr = err_reader.join().expect("stderr reader");
        match status.code() {
            Some(0) => parse_loss_line(&stdout),
            Some(code) => Err(OracleError::Failed { code, stderr }),
            None => Err(OracleError::Killed),
        }
    }
}

impl LossOracle for ExternalOracle {
    fn evaluate(&self, merged: &LoraAdapter, task_id: &str) -> Result<f64, OracleError> {
        let dir = tempfile::tempdir()?;
        let path = dir.path().join("merged.adpt");
        write_adapter(merged, &path)?;
        self.run(&path, task_id)
    }

    fn examples_per_task(&self) -> usize {
        self.examples_per_task
    }
}

/// Identity of one evaluation: which merge, which cluster members, which task.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub merge_digest: String,
    pub members_digest: String,
    pub task_id: String,
}

impl CacheKey {
    /// Member order does not matter.
    pub fn new(merge_cfg: &MergeConfig, members: &[&str], task_id: &str) -> Self {
        let mut sorted: Vec<&str> = members.to_vec();
        sorted.sort_unstable();
        let mut h = Sha256::new();
        for m in &sorted {
            h.update(m.as_bytes());
            h.update([0u8]);
        }
        Self {
            merge_digest: hex(&Sha256::digest(merge_cfg.canonical_string().as_bytes())),
            members_digest: hex(&h.finalize()),
            task_id: task_id.to_string(),
        }
    }
}

#[derive(Debug, Default)]
pub struct EvalCache {
    entries: Mutex<HashMap<CacheKey, f64>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl EvalCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &CacheKey) -> Option<f64> {
        let v = self.entries.lock().unwrap().get(key).copied();
        if v.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        v
    }

    pub fn insert(&self, key: CacheKey, loss: f64) {
        self.entries.lock().unwrap().insert(key, loss);
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

/// Wraps an oracle with an [`EvalCache`]. Callers that know the cluster
/// composition use [`CachedOracle::evaluate_keyed`], which skips both the
/// merge and the inner evaluation on a hit. Errors are never cached.
pub struct CachedOracle<O> {
    inner: O,
    cache: EvalCache,
    inner_calls: AtomicU64,
}

impl<O: LossOracle> CachedOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            cache: EvalCache::new(),
            inner_calls: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn cache(&self) -> &EvalCache {
        &self.cache
    }

    pub fn inner_calls(&self) -> u64 {
        self.inner_calls.load(Ordering::Relaxed)
    }

    pub fn evaluate_keyed<E>(
        &self,
        key: CacheKey,
        merged: impl FnOnce() -> Result<LoraAdapter, E>,
    ) -> Result<f64, E>
    where
        E: From<OracleError>,
    {
        if let Some(v) = self.cache.get(&key) {
            return Ok(v);
        }
        self.cache.misses.fetch_add(1, Ordering::Relaxed);
        let adapter = merged()?;
        self.inner_calls.fetch_add(1, Ordering::Relaxed);
        let loss = self.inner.evaluate(&adapter, &key.task_id)?;
        self.cache.insert(key, loss);
        Ok(loss)
    }
}

impl<O: LossOracle> LossOracle for CachedOracle<O> {
    /// Without cluster context the key falls back to the weight digest.
    fn evaluate(&self, merged: &LoraAdapter, task_id: &str) -> Result<f64, OracleError> {
        let key = CacheKey {
            merge_digest: String::new(),
            members_digest: weights_digest(merged),
            task_id: task_id.to_string(),
        };
        self.evaluate_keyed(key, || Ok::<_, OracleError>(merged.clone()))
    }

    fn examples_per_task(&self) -> usize {
        self.inner.examples_per_task()
    }
}
