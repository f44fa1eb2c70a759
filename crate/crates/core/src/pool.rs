//! The prompt parameter pool.
//!
//! Each period contributes one segment of per-node factors. In low-rank mode
//! a segment holds `A` (`n_new x k`) and every segment shares one adjustment
//! matrix `B` (`k x d`), so the materialized prompt is `concat(A) B`. Full
//! mode stores `n_new x d` prompts directly and is the expand-only reference.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::graph::NodeId;
use crate::linalg::Matrix;
use crate::nn::{Parameter, Tape, Tensor, Var};
use crate::rng;
use crate::{Error, Result};

pub const DEFAULT_RANK: usize = 6;
pub const POOL_VERSION: &str = "v1";
const POOL_MAGIC: &str = "eac-pool";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    LowRank,
    Full,
}

impl PoolMode {
    fn tag(self) -> &'static str {
        match self {
            PoolMode::LowRank => "lowrank",
            PoolMode::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolSegment {
    pub period_index: usize,
    pub node_ids: Vec<NodeId>,
    /// `n_new x k` in low-rank mode, `n_new x d` in full mode.
    pub factor: Parameter,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub tunable: usize,
    pub materialized: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    segments: Vec<PoolSegment>,
    adjust: Option<Parameter>,
    rank: usize,
    width: usize,
    mode: PoolMode,
}

fn segment_name(i: usize) -> String {
    format!("pool.segment{i}")
}

const ADJUST_NAME: &str = "pool.adjust";

impl PromptPool {
    /// Pool over the first period's nodes. Factors start at zero; `B` is
    /// Gaussian with standard deviation `1/sqrt(k)`, so the initial prompt is
    /// exactly zero while gradients reach `A` through `B`.
    pub fn init(nodes: &[NodeId], width: usize, rank: usize, mode: PoolMode, seed: u64) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::invalid("nodes", "a pool needs at least one node"));
        }
        if width == 0 {
            return Err(Error::invalid("d", "prompt width must be positive"));
        }
        check_distinct(&BTreeSet::new(), nodes)?;
        let adjust = match mode {
            PoolMode::LowRank => {
                if rank == 0 || rank > nodes.len().min(width) {
                    return Err(Error::invalid(
                        "k",
                        format!("rank {rank} must be in [1, min(n={}, d={width})]", nodes.len()),
                    ));
                }
                let mut r = rng::stream(seed, "pool/adjust");
                let std = 1.0 / (rank as f64).sqrt();
                let data = (0..rank * width).map(|_| std * rng::normal(&mut r)).collect();
                Some(Parameter::new(ADJUST_NAME, Tensor::new(alloc::vec![rank, width], data)?))
            }
            PoolMode::Full => None,
        };
        let mut pool = PromptPool { segments: Vec::new(), adjust, rank, width, mode };
        pool.push_segment(1, nodes);
        Ok(pool)
    }

    fn factor_cols(&self) -> usize {
        match self.mode {
            PoolMode::LowRank => self.rank,
            PoolMode::Full => self.width,
        }
    }

    fn push_segment(&mut self, period_index: usize, ids: &[NodeId]) {
        let name = segment_name(self.segments.len());
        let factor = Parameter::new(name, Tensor::zeros(&[ids.len(), self.factor_cols()]));
        self.segments.push(PoolSegment { period_index, node_ids: ids.to_vec(), factor });
    }

    /// Appends a zero-initialized segment for `new_ids`; existing values are untouched.
    pub fn expand(&mut self, period_index: usize, new_ids: &[NodeId]) -> Result<()> {
        if new_ids.is_empty() {
            return Ok(());
        }
        let existing: BTreeSet<&NodeId> = self.segments.iter().flat_map(|s| &s.node_ids).collect();
        check_distinct(&existing, new_ids)?;
        self.push_segment(period_index, new_ids);
        Ok(())
    }

    pub fn segments(&self) -> &[PoolSegment] {
        &self.segments
    }

    pub fn adjust(&self) -> Option<&Parameter> {
        self.adjust.as_ref()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mode(&self) -> PoolMode {
        self.mode
    }

    pub fn num_nodes(&self) -> usize {
        self.segments.iter().map(|s| s.node_ids.len()).sum()
    }

    /// Node ids in pool row order.
    pub fn node_ids(&self) -> Vec<NodeId> {
        self.segments.iter().flat_map(|s| s.node_ids.iter().cloned()).collect()
    }

    /// The `n x d` prompt matrix in pool row order.
    pub fn materialize(&self) -> Matrix {
        let cols = self.factor_cols();
        let mut stacked = Vec::with_capacity(self.num_nodes() * cols);
        for s in &self.segments {
            stacked.extend_from_slice(s.factor.value.data());
        }
        let stacked = Matrix::from_vec(self.num_nodes(), cols, stacked).expect("segment shapes");
        match &self.adjust {
            Some(b) => {
                let b = Matrix::from_vec(self.rank, self.width, b.value.data().to_vec()).expect("adjust shape");
                stacked.matmul(&b).expect("rank matches")
            }
            None => stacked,
        }
    }

    pub fn param_count(&self) -> ParamCount {
        let factors: usize = self.segments.iter().map(|s| s.factor.numel()).sum();
        let tunable = factors + self.adjust.as_ref().map_or(0, Parameter::numel);
        let materialized = self.num_nodes() * self.width;
        ParamCount { tunable, materialized, ratio: tunable as f64 / materialized as f64 }
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter> {
        self.segments.iter().map(|s| &s.factor).chain(self.adjust.as_ref())
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.segments.iter_mut().map(|s| &mut s.factor).chain(self.adjust.as_mut())
    }

    /// Marks which pool parameters train this period. The newest segment always trains.
    pub fn set_trainable(&mut self, old_segments: bool, adjust: bool) {
        let last = self.segments.len().saturating_sub(1);
        for (i, s) in self.segments.iter_mut().enumerate() {
            s.factor.trainable = i == last || old_segments;
        }
        if let Some(b) = &mut self.adjust {
            b.trainable = adjust;
        }
    }

    /// Records the materialized prompt on `tape` as a function of the pool parameters.
    pub fn register(&self, tape: &mut Tape) -> Result<Var> {
        let parts: Vec<Var> = self.segments.iter().map(|s| tape.param(&s.factor)).collect();
        let stacked = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        match &self.adjust {
            Some(b) => {
                let b = tape.param(b);
                tape.matmul(stacked, b)
            }
            None => Ok(stacked),
        }
    }

    /// Text form: header `eac-pool v1 k=<k> d=<d> mode=<m>`, then for each
    /// segment a `segment <period> <id>...` line followed by its factor rows,
    /// then `adjust` and the rows of `B` (low-rank only).
    pub fn encode(&self) -> Result<String> {
        let mut out = String::new();
        let _ = writeln!(out, "{POOL_MAGIC} {POOL_VERSION} k={} d={} mode={}", self.rank, self.width, self.mode.tag());
        for s in &self.segments {
            let _ = write!(out, "segment {}", s.period_index);
            for id in &s.node_ids {
                if id.as_str().is_empty() || id.as_str().chars().any(char::is_whitespace) {
                    return Err(Error::invalid("node id", format!("`{id}` cannot be stored in a pool file")));
                }
                let _ = write!(out, " {id}");
            }
            out.push('\n');
            write_rows(&mut out, s.factor.value.data(), self.factor_cols());
        }
        if let Some(b) = &self.adjust {
            out.push_str("adjust\n");
            write_rows(&mut out, b.value.data(), self.width);
        }
        Ok(out)
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| !l.trim().is_empty()).peekable();
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, reason: "empty pool file".into() })?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some(POOL_MAGIC) {
            return Err(Error::Parse { line: 1, reason: format!("not a pool header: `{header}`") });
        }
        match fields.next() {
            Some(POOL_VERSION) => {}
            Some(other) => return Err(Error::Version(other.to_string())),
            None => return Err(Error::Parse { line: 1, reason: "missing version".into() }),
        }
        let (mut rank, mut width, mut mode) = (None, None, None);
        for f in fields {
            match f.split_once('=') {
                Some(("k", v)) => rank = v.parse::<usize>().ok(),
                Some(("d", v)) => width = v.parse::<usize>().ok(),
                Some(("mode", "lowrank")) => mode = Some(PoolMode::LowRank),
                Some(("mode", "full")) => mode = Some(PoolMode::Full),
                _ => return Err(Error::Parse { line: 1, reason: format!("bad header field `{f}`") }),
            }
        }
        let (Some(rank), Some(width), Some(mode)) = (rank, width, mode) else {
            return Err(Error::Parse { line: 1, reason: "header needs k, d and mode".into() });
        };
        let mut pool = PromptPool { segments: Vec::new(), adjust: None, rank, width, mode };
        let cols = pool.factor_cols();
        let mut seen = BTreeSet::new();
        while let Some(&(line_no, line)) = lines.peek() {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("segment") => {
                    lines.next();
                    let period_index = parts
                        .next()
                        .and_then(|p| p.parse().ok())
                        .ok_or(Error::Parse { line: line_no, reason: "segment needs a period index".into() })?;
                    let ids: Vec<NodeId> = parts.map(NodeId::from).collect();
                    for id in &ids {
                        if !seen.insert(id.clone()) {
                            return Err(Error::DuplicateNode(id.to_string()));
                        }
                    }
                    let data = read_rows(&mut lines, ids.len(), cols, line_no)?;
                    let factor = Parameter::new(segment_name(pool.segments.len()), Tensor::new(alloc::vec![ids.len(), cols], data)?);
                    pool.segments.push(PoolSegment { period_index, node_ids: ids, factor });
                }
                Some("adjust") if mode == PoolMode::LowRank => {
                    lines.next();
                    let data = read_rows(&mut lines, rank, width, line_no)?;
                    pool.adjust = Some(Parameter::new(ADJUST_NAME, Tensor::new(alloc::vec![rank, width], data)?));
                }
                _ => return Err(Error::Parse { line: line_no, reason: format!("unexpected line `{line}`") }),
            }
        }
        if pool.segments.is_empty() {
            return Err(Error::Parse { line: 1, reason: "pool has no segments".into() });
        }
        if mode == PoolMode::LowRank && pool.adjust.is_none() {
            return Err(Error::Parse { line: 1, reason: "truncated pool: missing adjustment matrix".into() });
        }
        Ok(pool)
    }

    /// Rejects pools whose dimensions differ from an experiment configuration.
    pub fn check_dims(&self, width: usize, rank: Option<usize>) -> Result<()> {
        if self.width != width {
            return Err(Error::Config(format!("pool width d={} but configuration expects d={width}", self.width)));
        }
        if let Some(k) = rank {
            if self.mode == PoolMode::LowRank && self.rank != k {
                return Err(Error::Config(format!("pool rank k={} but configuration expects k={k}", self.rank)));
            }
        }
        Ok(())
    }
}

fn check_distinct(existing: &BTreeSet<&NodeId>, ids: &[NodeId]) -> Result<()> {
    let mut fresh = BTreeSet::new();
    for id in ids {
        if existing.contains(id) || !fresh.insert(id) {
            return Err(Error::DuplicateNode(id.to_string()));
        }
    }
    Ok(())
}

fn write_rows(out: &mut String, data: &[f64], cols: usize) {
    for row in data.chunks(cols.max(1)) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let _ = write!(out, "{v:?}");
        }
        out.push('\n');
    }
}

fn read_rows<'a>(
    lines: &mut core::iter::Peekable<impl Iterator<Item = (usize, &'a str)>>,
    rows: usize,
    cols: usize,
    start: usize,
) -> Result<Vec<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (line_no, line) = lines
            .next()
            .ok_or(Error::Parse { line: start + r + 1, reason: format!("truncated pool: expected {rows} rows") })?;
        let before = data.len();
        for v in line.split_whitespace() {
            data.push(v.parse::<f64>().map_err(|_| Error::Parse { line: line_no, reason: format!("bad value `{v}`") })?);
        }
        if data.len() - before != cols {
            return Err(Error::Parse { line: line_no, reason: format!("expected {cols} values, found {}", data.len() - before) });
        }
    }
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::svd;
    use alloc::vec;

    fn ids(prefix: &str, n: usize) -> Vec<NodeId> {
        (0..n).map(|i| NodeId::new(format!("{prefix}{i}"))).collect()
    }

    fn randomize(pool: &mut PromptPool, seed: u64) {
        let mut r = rng::stream(seed, "fill");
        for p in pool.parameters_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng::normal(&mut r));
        }
    }

    #[test]
    fn init_materializes_zero() {
        let pool = PromptPool::init(&ids("a", 10), 8, 3, PoolMode::LowRank, 0).unwrap();
        assert!(pool.materialize().as_slice().iter().all(|v| *v == 0.0));
        assert!(pool.adjust().unwrap().value.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn counts() {
        let pool = PromptPool::init(&ids("a", 100), 64, 6, PoolMode::LowRank, 0).unwrap();
        assert_eq!(pool.param_count().tunable, 984);
        let full = PromptPool::init(&ids("a", 100), 64, 6, PoolMode::Full, 0).unwrap();
        assert_eq!(full.param_count().tunable, 6400);
        assert_eq!(full.param_count().ratio, 1.0);
        let big = PromptPool::init(&ids("a", 500), 64, 6, PoolMode::LowRank, 0).unwrap();
        let c = big.param_count();
        assert_eq!((c.tunable, c.materialized), (3384, 32000));
        assert!((c.ratio - 0.10575).abs() < 1e-12);
    }

    #[test]
    fn init_rejects_bad_rank() {
        assert!(PromptPool::init(&ids("a", 4), 8, 5, PoolMode::LowRank, 0).is_err());
        assert!(PromptPool::init(&ids("a", 4), 8, 0, PoolMode::LowRank, 0).is_err());
        assert!(PromptPool::init(&[], 8, 1, PoolMode::LowRank, 0).is_err());
    }

    #[test]
    fn expand_appends_only() {
        let mut pool = PromptPool::init(&ids("a", 2), 4, 2, PoolMode::LowRank, 0).unwrap();
        randomize(&mut pool, 1);
        let before = pool.clone();
        pool.expand(2, &[]).unwrap();
        assert_eq!(pool, before);
        pool.expand(2, &[NodeId::from("c")]).unwrap();
        assert_eq!(pool.segments().len(), 2);
        assert_eq!(pool.segments()[0], before.segments()[0]);
        assert_eq!(pool.adjust(), before.adjust());
        let (m0, m1) = (before.materialize(), pool.materialize());
        assert_eq!(m1.rows(), 3);
        assert_eq!(m1.row(0), m0.row(0));
        assert_eq!(m1.row(1), m0.row(1));
        assert!(m1.row(2).iter().all(|v| *v == 0.0));
        assert_eq!(pool.param_count().tunable, before.param_count().tunable + 2);
        assert_eq!(pool.expand(3, &[NodeId::from("a0")]), Err(Error::DuplicateNode("a0".into())));
    }

    #[test]
    fn materialize_example() {
        let mut pool = PromptPool::init(&ids("a", 2), 2, 2, PoolMode::LowRank, 0).unwrap();
        let mut params: Vec<&mut Parameter> = pool.parameters_mut().collect();
        params[0].value.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        params[1].value.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool.materialize().as_slice(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tape_materialization_matches() {
        let mut pool = PromptPool::init(&ids("a", 3), 4, 2, PoolMode::LowRank, 0).unwrap();
        pool.expand(2, &ids("b", 2)).unwrap();
        randomize(&mut pool, 2);
        let mut tape = Tape::new();
        let p = pool.register(&mut tape).unwrap();
        assert_eq!(tape.value(p).data(), pool.materialize().as_slice());
    }

    #[test]
    fn lowrank_rank_is_bounded() {
        let mut pool = PromptPool::init(&ids("a", 12), 10, 3, PoolMode::LowRank, 4).unwrap();
        pool.expand(2, &ids("b", 5)).unwrap();
        randomize(&mut pool, 5);
        let s = svd(&pool.materialize());
        assert!(s.singular_values[..3].iter().all(|v| *v > 1e-6));
        assert!(s.singular_values[3..].iter().all(|v| *v < 1e-10));
    }

    #[test]
    fn trainable_flags() {
        let mut pool = PromptPool::init(&ids("a", 3), 4, 2, PoolMode::LowRank, 0).unwrap();
        pool.expand(2, &ids("b", 2)).unwrap();
        pool.set_trainable(false, true);
        let flags: Vec<bool> = pool.parameters().map(|p| p.trainable).collect();
        assert_eq!(flags, vec![false, true, true]);
    }

    #[test]
    fn encode_round_trip_and_errors() {
        let mut pool = PromptPool::init(&ids("a", 3), 4, 2, PoolMode::LowRank, 0).unwrap();
        pool.expand(2, &ids("b", 2)).unwrap();
        randomize(&mut pool, 3);
        let text = pool.encode().unwrap();
        assert!(text.starts_with("eac-pool v1 k=2 d=4 mode=lowrank\n"));
        assert_eq!(PromptPool::decode(&text).unwrap(), pool);
        let full = PromptPool::init(&ids("a", 3), 4, 2, PoolMode::Full, 0).unwrap();
        assert_eq!(PromptPool::decode(&full.encode().unwrap()).unwrap(), full);

        assert_eq!(PromptPool::decode(&text.replace("v1", "v7")), Err(Error::Version("v7".into())));
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(matches!(PromptPool::decode(&truncated), Err(Error::Parse { .. })));
        assert!(matches!(pool.check_dims(8, None), Err(Error::Config(_))));
        assert!(pool.check_dims(4, Some(2)).is_ok());
    }
}
