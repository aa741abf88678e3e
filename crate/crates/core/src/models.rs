//! Policy and process-reward parameterizations over context windows.
//!
//! Both models map `(context, action)` to a scalar, either through an exact
//! table keyed by the context tokens or through a hashed one-hot linear
//! layer whose table size bounds the parameter count. Policies are softmax
//! over raw logits; all parameters start at zero (uniform policy, zero
//! reward).

use crate::error::{Error, Result};
use crate::mdp::{Source, State, Token, TokenMdp, Trajectory};
use crate::rng;
use rand::Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRepr {
    Tabular,
    Linear,
}

impl std::fmt::Display for ParamRepr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ParamRepr::Tabular => "tabular",
            ParamRepr::Linear => "linear",
        })
    }
}

impl std::str::FromStr for ParamRepr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tabular" => Ok(ParamRepr::Tabular),
            "linear" => Ok(ParamRepr::Linear),
            other => Err(Error::Config(format!("unknown repr `{other}`"))),
        }
    }
}

/// Identity of one scalar parameter, usable as a gradient coordinate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamCell {
    /// Tabular cell: (context tokens, action).
    Ctx(Vec<Token>, Token),
    /// Linear feature index: `hash(context) % table_size * vocab + action`.
    Feat(usize),
}

/// Sparse gradient over parameter cells. BTreeMap keeps every iteration
/// deterministic.
pub type Gradient = BTreeMap<ParamCell, f64>;

pub fn grad_l2_norm(g: &Gradient) -> f64 {
    g.values().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `g` in place so its L2 norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grad_norm(g: &mut Gradient, max_norm: f64) -> f64 {
    let norm = grad_l2_norm(g);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for v in g.values_mut() {
            *v *= scale;
        }
    }
    norm
}

/// Adds `scale * src` into `dst`, in key order.
pub fn grad_add_scaled(dst: &mut Gradient, src: &Gradient, scale: f64) {
    for (k, v) in src {
        *dst.entry(k.clone()).or_insert(0.0) += scale * v;
    }
}

#[derive(Debug, Clone)]
pub enum ParamTable {
    Tabular {
        vocab: u32,
        cells: BTreeMap<Vec<Token>, Vec<f64>>,
    },
    Linear {
        vocab: u32,
        table_size: usize,
        salt: u64,
        weights: Vec<f64>,
    },
}

impl ParamTable {
    pub fn tabular(vocab: u32) -> Self {
        ParamTable::Tabular {
            vocab,
            cells: BTreeMap::new(),
        }
    }

    pub fn linear(vocab: u32, table_size: usize, salt: u64) -> Self {
        ParamTable::Linear {
            vocab,
            table_size,
            salt,
            weights: vec![0.0; table_size * vocab as usize],
        }
    }

    pub fn repr(&self) -> ParamRepr {
        match self {
            ParamTable::Tabular { .. } => ParamRepr::Tabular,
            ParamTable::Linear { .. } => ParamRepr::Linear,
        }
    }

    pub fn vocab(&self) -> u32 {
        match self {
            ParamTable::Tabular { vocab, .. } | ParamTable::Linear { vocab, .. } => *vocab,
        }
    }

    fn row_index(&self, ctx: &[Token]) -> usize {
        match self {
            ParamTable::Linear {
                table_size, salt, ..
            } => (rng::context_hash(*salt, ctx) % *table_size as u64) as usize,
            ParamTable::Tabular { .. } => unreachable!("row_index is linear-only"),
        }
    }

    /// Per-action values at a context (zeros when unvisited).
    pub fn action_values(&self, ctx: &[Token]) -> Vec<f64> {
        match self {
            ParamTable::Tabular { vocab, cells } => cells
                .get(ctx)
                .cloned()
                .unwrap_or_else(|| vec![0.0; *vocab as usize]),
            ParamTable::Linear { vocab, weights, .. } => {
                let row = self.row_index(ctx) * *vocab as usize;
                weights[row..row + *vocab as usize].to_vec()
            }
        }
    }

    pub fn value(&self, ctx: &[Token], action: Token) -> f64 {
        match self {
            ParamTable::Tabular { cells, .. } => cells
                .get(ctx)
                .map(|row| row[action as usize])
                .unwrap_or(0.0),
            ParamTable::Linear { vocab, weights, .. } => {
                weights[self.row_index(ctx) * *vocab as usize + action as usize]
            }
        }
    }

    pub fn cell(&self, ctx: &[Token], action: Token) -> ParamCell {
        match self {
            ParamTable::Tabular { .. } => ParamCell::Ctx(ctx.to_vec(), action),
            ParamTable::Linear { vocab, .. } => {
                ParamCell::Feat(self.row_index(ctx) * *vocab as usize + action as usize)
            }
        }
    }

    pub fn add(&mut self, ctx: &[Token], action: Token, delta: f64) {
        match self {
            ParamTable::Tabular { vocab, cells } => {
                let row = cells
                    .entry(ctx.to_vec())
                    .or_insert_with(|| vec![0.0; *vocab as usize]);
                row[action as usize] += delta;
            }
            ParamTable::Linear { vocab, weights, .. } => {
                let idx = self.row_index(ctx) * *vocab as usize + action as usize;
                weights[idx] += delta;
            }
        }
    }

    pub fn add_cell(&mut self, cell: &ParamCell, delta: f64) {
        match (self, cell) {
            (ParamTable::Tabular { vocab, cells }, ParamCell::Ctx(ctx, a)) => {
                let row = cells
                    .entry(ctx.clone())
                    .or_insert_with(|| vec![0.0; *vocab as usize]);
                row[*a as usize] += delta;
            }
            (ParamTable::Linear { weights, .. }, ParamCell::Feat(idx)) => {
                weights[*idx] += delta;
            }
            _ => panic!("gradient cell kind does not match table representation"),
        }
    }

    pub fn cell_value(&self, cell: &ParamCell) -> f64 {
        match (self, cell) {
            (ParamTable::Tabular { cells, .. }, ParamCell::Ctx(ctx, a)) => cells
                .get(ctx)
                .map(|row| row[*a as usize])
                .unwrap_or(0.0),
            (ParamTable::Linear { weights, .. }, ParamCell::Feat(idx)) => weights[*idx],
            _ => panic!("gradient cell kind does not match table representation"),
        }
    }

    /// Nonzero entries as (key string, value), sorted; for checkpoints.
    fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        match self {
            ParamTable::Tabular { cells, .. } => {
                for (ctx, row) in cells {
                    for (a, v) in row.iter().enumerate() {
                        if *v != 0.0 {
                            out.push((format!("{}:{a}", encode_ctx(ctx)), *v));
                        }
                    }
                }
            }
            ParamTable::Linear { weights, .. } => {
                for (i, v) in weights.iter().enumerate() {
                    if *v != 0.0 {
                        out.push((format!("f{i}"), *v));
                    }
                }
            }
        }
        out
    }

    fn set_entry(&mut self, key: &str, value: f64) -> Result<()> {
        match self {
            ParamTable::Tabular { vocab, cells } => {
                let (ctx_s, a_s) = key
                    .rsplit_once(':')
                    .ok_or_else(|| Error::CheckpointMismatch(format!("bad key `{key}`")))?;
                let ctx = decode_ctx(ctx_s)?;
                let a: usize = a_s
                    .parse()
                    .map_err(|_| Error::CheckpointMismatch(format!("bad action in `{key}`")))?;
                if a >= *vocab as usize {
                    return Err(Error::CheckpointMismatch(format!(
                        "action {a} outside vocab {vocab}"
                    )));
                }
                let row = cells
                    .entry(ctx)
                    .or_insert_with(|| vec![0.0; *vocab as usize]);
                row[a] = value;
                Ok(())
            }
            ParamTable::Linear { weights, .. } => {
                let idx: usize = key
                    .strip_prefix('f')
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::CheckpointMismatch(format!("bad key `{key}`")))?;
                if idx >= weights.len() {
                    return Err(Error::CheckpointMismatch(format!(
                        "feature {idx} outside table"
                    )));
                }
                weights[idx] = value;
                Ok(())
            }
        }
    }
}

fn encode_ctx(ctx: &[Token]) -> String {
    if ctx.is_empty() {
        "-".into()
    } else {
        ctx.iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(".")
    }
}

fn decode_ctx(s: &str) -> Result<Vec<Token>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split('.')
        .map(|p| {
            p.parse::<Token>()
                .map_err(|_| Error::CheckpointMismatch(format!("bad context `{s}`")))
        })
        .collect()
}

/// Per-step contexts of a trajectory under a context window of order `k`.
/// Validates every token against the vocabulary.
pub fn trajectory_contexts(
    mdp: &TokenMdp,
    traj: &Trajectory,
    k: usize,
) -> Result<Vec<Vec<Token>>> {
    let mut state = mdp.initial_state(traj.prompt_id)?;
    let mut out = Vec::with_capacity(traj.len());
    for &a in &traj.actions {
        out.push(mdp.context_key(&state, k)?);
        state = mdp.step(&state, a)?;
    }
    Ok(out)
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|l| (l - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|l| l - lse).collect()
}

// ---------------------------------------------------------------------------
// Policy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub vocab_size: u32,
    pub context_order: usize,
    pub table: ParamTable,
}

impl PolicyParams {
    /// Zero logits: the uniform policy.
    pub fn uniform(vocab_size: u32, context_order: usize, table: ParamTable) -> Self {
        assert_eq!(table.vocab(), vocab_size);
        PolicyParams {
            vocab_size,
            context_order,
            table,
        }
    }

    pub fn uniform_tabular(vocab_size: u32, context_order: usize) -> Self {
        Self::uniform(vocab_size, context_order, ParamTable::tabular(vocab_size))
    }

    /// Tabular policy with logits drawn uniformly from [-amplitude, amplitude]
    /// on every context reachable in `mdp`. For tests and estimator studies.
    pub fn random_tabular(
        mdp: &TokenMdp,
        context_order: usize,
        amplitude: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut policy = Self::uniform_tabular(mdp.vocab_size, context_order);
        let ctxs = reachable_contexts(mdp, context_order)?;
        let mut r = rng::stream(&[seed, 0x706f6c]);
        for ctx in ctxs {
            for a in 0..mdp.vocab_size {
                policy
                    .table
                    .add(&ctx, a, r.gen_range(-amplitude..=amplitude));
            }
        }
        Ok(policy)
    }

    pub fn logits(&self, ctx: &[Token]) -> Vec<f64> {
        self.table.action_values(ctx)
    }

    pub fn log_probs(&self, ctx: &[Token]) -> Vec<f64> {
        log_softmax(&self.logits(ctx))
    }

    pub fn probs(&self, ctx: &[Token]) -> Vec<f64> {
        self.log_probs(ctx).iter().map(|lp| lp.exp()).collect()
    }

    /// Σ_t log π(a_t | s_t) along a trajectory; always ≤ 0.
    pub fn policy_logprob(&self, mdp: &TokenMdp, traj: &Trajectory) -> Result<f64> {
        let ctxs = trajectory_contexts(mdp, traj, self.context_order)?;
        let mut total = 0.0;
        for (ctx, &a) in ctxs.iter().zip(&traj.actions) {
            total += self.log_probs(ctx)[a as usize];
        }
        Ok(total)
    }

    /// Shannon entropy (nats) of the conditional distribution at a state.
    pub fn entropy(&self, mdp: &TokenMdp, state: &State) -> Result<f64> {
        let ctx = mdp.context_key(state, self.context_order)?;
        Ok(entropy_of_log_probs(&self.log_probs(&ctx)))
    }

    /// n rollouts with recorded behavior log-probs; deterministic per
    /// (seed, prompt, index).
    pub fn sample_rollouts(
        &self,
        mdp: &TokenMdp,
        prompt_id: u32,
        n: usize,
        seed: u64,
    ) -> Result<Vec<Trajectory>> {
        self.sample_rollouts_tempered(mdp, prompt_id, n, seed, 1.0)
    }

    /// Temperature-scaled sampling: probabilities ∝ exp(logit / temperature).
    pub fn sample_rollouts_tempered(
        &self,
        mdp: &TokenMdp,
        prompt_id: u32,
        n: usize,
        seed: u64,
        temperature: f64,
    ) -> Result<Vec<Trajectory>> {
        if n == 0 {
            return Err(Error::Config("rollout count must be >= 1".into()));
        }
        if temperature <= 0.0 {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        mdp.prompt(prompt_id)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut r = rng::stream(&[seed, 0x726f6c6c, prompt_id as u64, i as u64]);
            let mut state = State::initial(prompt_id);
            let mut actions = Vec::new();
            let mut logprobs = Vec::new();
            while !mdp.is_terminal(&state) {
                let ctx = mdp.context_key(&state, self.context_order)?;
                let scaled: Vec<f64> = self
                    .logits(&ctx)
                    .iter()
                    .map(|l| l / temperature)
                    .collect();
                let lps = log_softmax(&scaled);
                let u: f64 = r.gen();
                let mut acc = 0.0;
                let mut chosen = self.vocab_size - 1;
                for (a, lp) in lps.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        chosen = a as u32;
                        break;
                    }
                }
                actions.push(chosen);
                logprobs.push(lps[chosen as usize]);
                state = mdp.step(&state, chosen)?;
            }
            out.push(Trajectory {
                prompt_id,
                actions,
                behavior_logprobs: Some(logprobs),
                outcome: None,
                source: Source::Policy,
            });
        }
        Ok(out)
    }

    /// Greedy argmax decode; ties broken by lowest token id.
    pub fn greedy_rollout(&self, mdp: &TokenMdp, prompt_id: u32) -> Result<Trajectory> {
        let mut state = mdp.initial_state(prompt_id)?;
        let mut actions = Vec::new();
        while !mdp.is_terminal(&state) {
            let ctx = mdp.context_key(&state, self.context_order)?;
            let logits = self.logits(&ctx);
            let mut best = 0usize;
            for (a, l) in logits.iter().enumerate() {
                if *l > logits[best] {
                    best = a;
                }
            }
            actions.push(best as u32);
            state = mdp.step(&state, best as u32)?;
        }
        Ok(Trajectory {
            prompt_id,
            actions,
            behavior_logprobs: None,
            outcome: None,
            source: Source::Policy,
        })
    }

    /// Ascends along `g`: logits += step * g.
    pub fn apply_gradient(&mut self, g: &Gradient, step: f64) {
        for (cell, v) in g {
            self.table.add_cell(cell, step * v);
        }
    }

    pub fn freeze(&self) -> FrozenPolicy {
        FrozenPolicy {
            inner: self.clone(),
        }
    }
}

pub fn entropy_of_log_probs(lps: &[f64]) -> f64 {
    -lps.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

/// Immutable policy snapshot (π_ref / π_old).
#[derive(Debug, Clone)]
pub struct FrozenPolicy {
    inner: PolicyParams,
}

impl FrozenPolicy {
    pub fn policy(&self) -> &PolicyParams {
        &self.inner
    }
}

/// All context windows reachable by feasible prefixes, deduplicated. Only
/// sensible on enumerable instances.
pub fn reachable_contexts(mdp: &TokenMdp, k: usize) -> Result<std::collections::BTreeSet<Vec<Token>>> {
    let mut out = std::collections::BTreeSet::new();
    for p in &mdp.prompts {
        for traj in mdp.enumerate_trajectories(p.id)? {
            for ctx in trajectory_contexts(mdp, &traj, k)? {
                out.insert(ctx);
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reward model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RewardParams {
    pub vocab_size: u32,
    pub context_order: usize,
    pub value_clip: Option<f64>,
    pub table: ParamTable,
}

impl RewardParams {
    pub fn zeros(
        vocab_size: u32,
        context_order: usize,
        value_clip: Option<f64>,
        table: ParamTable,
    ) -> Self {
        assert_eq!(table.vocab(), vocab_size);
        RewardParams {
            vocab_size,
            context_order,
            value_clip,
            table,
        }
    }

    pub fn zeros_tabular(vocab_size: u32, context_order: usize) -> Self {
        Self::zeros(vocab_size, context_order, None, ParamTable::tabular(vocab_size))
    }

    /// Tabular reward with entries drawn uniformly from
    /// [-amplitude, amplitude] on every reachable context. For oracle tests.
    pub fn random_tabular(
        mdp: &TokenMdp,
        context_order: usize,
        amplitude: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut reward = Self::zeros_tabular(mdp.vocab_size, context_order);
        let ctxs = reachable_contexts(mdp, context_order)?;
        let mut r = rng::stream(&[seed, 0x726577]);
        for ctx in ctxs {
            for a in 0..mdp.vocab_size {
                reward
                    .table
                    .add(&ctx, a, r.gen_range(-amplitude..=amplitude));
            }
        }
        Ok(reward)
    }

    fn clip(&self, v: f64) -> f64 {
        match self.value_clip {
            Some(c) => v.clamp(-c, c),
            None => v,
        }
    }

    /// r_φ(s, a): finite scalar, clamped to ±value_clip when set.
    pub fn prm_score(&self, mdp: &TokenMdp, state: &State, action: Token) -> Result<f64> {
        if action >= self.vocab_size {
            return Err(Error::InvalidAction {
                action,
                vocab_size: self.vocab_size,
            });
        }
        let ctx = mdp.context_key(state, self.context_order)?;
        Ok(self.clip(self.table.value(&ctx, action)))
    }

    pub fn score_ctx(&self, ctx: &[Token], action: Token) -> f64 {
        self.clip(self.table.value(ctx, action))
    }

    /// (Σ_t r_φ, mean per token) along a trajectory.
    pub fn trajectory_reward(&self, mdp: &TokenMdp, traj: &Trajectory) -> Result<(f64, f64)> {
        if traj.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        let ctxs = trajectory_contexts(mdp, traj, self.context_order)?;
        let mut sum = 0.0;
        for (ctx, &a) in ctxs.iter().zip(&traj.actions) {
            sum += self.score_ctx(ctx, a);
        }
        Ok((sum, sum / traj.len() as f64))
    }

    /// Gradient coordinates touched by a trajectory, one per token, in step
    /// order. Cells saturated by the value clip are omitted (subgradient 0).
    pub fn grad_cells(&self, mdp: &TokenMdp, traj: &Trajectory) -> Result<Vec<ParamCell>> {
        let ctxs = trajectory_contexts(mdp, traj, self.context_order)?;
        let mut out = Vec::with_capacity(traj.len());
        for (ctx, &a) in ctxs.iter().zip(&traj.actions) {
            let raw = self.table.value(ctx, a);
            let active = match self.value_clip {
                Some(c) => raw.abs() < c,
                None => true,
            };
            if active {
                out.push(self.table.cell(ctx, a));
            }
        }
        Ok(out)
    }

    /// Σ_t ∇_φ r_φ(s_t, a_t) as a sparse count vector.
    pub fn visitation(&self, mdp: &TokenMdp, traj: &Trajectory) -> Result<Gradient> {
        let mut g = Gradient::new();
        for cell in self.grad_cells(mdp, traj)? {
            *g.entry(cell).or_insert(0.0) += 1.0;
        }
        Ok(g)
    }

    /// Descends along `g` when `step` is negative; callers pick the sign.
    pub fn apply_gradient(&mut self, g: &Gradient, step: f64) {
        for (cell, v) in g {
            self.table.add_cell(cell, step * v);
        }
    }

    pub fn nudge(&mut self, cell: &ParamCell, delta: f64) {
        self.table.add_cell(cell, delta);
    }
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub policy_repr: ParamRepr,
    pub policy_context_order: usize,
    pub policy_table_size: usize,
    pub reward_repr: ParamRepr,
    pub reward_context_order: usize,
    pub reward_table_size: usize,
    pub value_clip: Option<f64>,
    /// Share the context featurization (hash salt) between policy and
    /// reward in the linear representation.
    pub shared_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            policy_repr: ParamRepr::Tabular,
            policy_context_order: 3,
            policy_table_size: 4096,
            reward_repr: ParamRepr::Tabular,
            reward_context_order: 3,
            reward_table_size: 4096,
            value_clip: Some(10.0),
            shared_context: false,
        }
    }
}

impl ModelConfig {
    fn policy_salt(&self) -> u64 {
        rng::derive_seed(&[0x706f6c69637966])
    }

    fn reward_salt(&self) -> u64 {
        if self.shared_context {
            self.policy_salt()
        } else {
            rng::derive_seed(&[0x72657761726466])
        }
    }

    pub fn build_policy(&self, vocab_size: u32) -> PolicyParams {
        let table = match self.policy_repr {
            ParamRepr::Tabular => ParamTable::tabular(vocab_size),
            ParamRepr::Linear => {
                ParamTable::linear(vocab_size, self.policy_table_size, self.policy_salt())
            }
        };
        PolicyParams::uniform(vocab_size, self.policy_context_order, table)
    }

    pub fn build_reward(&self, vocab_size: u32) -> RewardParams {
        let table = match self.reward_repr {
            ParamRepr::Tabular => ParamTable::tabular(vocab_size),
            ParamRepr::Linear => {
                ParamTable::linear(vocab_size, self.reward_table_size, self.reward_salt())
            }
        };
        RewardParams::zeros(vocab_size, self.reward_context_order, self.value_clip, table)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &str = "# prm-irl checkpoint v1";

fn write_table<W: Write>(
    w: &mut W,
    kind: &str,
    param_kind: &str,
    vocab: u32,
    context_order: usize,
    value_clip: Option<f64>,
    table: &ParamTable,
) -> Result<()> {
    writeln!(w, "{CKPT_MAGIC}")?;
    writeln!(w, "# kind {kind}")?;
    writeln!(w, "# repr {}", table.repr())?;
    writeln!(w, "# vocab_size {vocab}")?;
    writeln!(w, "# context_order {context_order}")?;
    match value_clip {
        Some(c) => writeln!(w, "# value_clip {c}")?,
        None => writeln!(w, "# value_clip none")?,
    }
    if let ParamTable::Linear {
        table_size, salt, ..
    } = table
    {
        writeln!(w, "# table_size {table_size}")?;
        writeln!(w, "# salt {salt}")?;
    }
    for (key, value) in table.entries() {
        writeln!(w, "{param_kind}\t{key}\t{value}")?;
    }
    Ok(())
}

struct CkptHeader {
    kind: String,
    repr: ParamRepr,
    vocab: u32,
    context_order: usize,
    value_clip: Option<f64>,
    table_size: usize,
    salt: u64,
    body: Vec<(String, String, f64)>,
}

fn read_table<R: BufRead>(r: R, path: &str) -> Result<CkptHeader> {
    let mut header = CkptHeader {
        kind: String::new(),
        repr: ParamRepr::Tabular,
        vocab: 0,
        context_order: 0,
        value_clip: None,
        table_size: 0,
        salt: 0,
        body: Vec::new(),
    };
    let mut saw_magic = false;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if lineno == 1 {
            if line.trim() != CKPT_MAGIC {
                return Err(Error::CheckpointMismatch(format!(
                    "{path}: missing checkpoint header"
                )));
            }
            saw_magic = true;
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            let mut it = rest.splitn(2, ' ');
            let key = it.next().unwrap_or("");
            let val = it.next().unwrap_or("").trim();
            match key {
                "kind" => header.kind = val.into(),
                "repr" => header.repr = val.parse()?,
                "vocab_size" => {
                    header.vocab = val.parse().map_err(|_| {
                        Error::CheckpointMismatch(format!("{path}: bad vocab_size"))
                    })?
                }
                "context_order" => {
                    header.context_order = val.parse().map_err(|_| {
                        Error::CheckpointMismatch(format!("{path}: bad context_order"))
                    })?
                }
                "value_clip" => {
                    header.value_clip = if val == "none" {
                        None
                    } else {
                        Some(val.parse().map_err(|_| {
                            Error::CheckpointMismatch(format!("{path}: bad value_clip"))
                        })?)
                    }
                }
                "table_size" => {
                    header.table_size = val.parse().map_err(|_| {
                        Error::CheckpointMismatch(format!("{path}: bad table_size"))
                    })?
                }
                "salt" => {
                    header.salt = val.parse().map_err(|_| {
                        Error::CheckpointMismatch(format!("{path}: bad salt"))
                    })?
                }
                other => {
                    return Err(Error::CheckpointMismatch(format!(
                        "{path}: unknown header field `{other}`"
                    )))
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno,
                msg: "expected `param_kind<TAB>key<TAB>value`".into(),
            });
        }
        let value: f64 = fields[2].parse().map_err(|e| Error::Parse {
            path: path.into(),
            line: lineno,
            msg: format!("value: {e}"),
        })?;
        header
            .body
            .push((fields[0].to_string(), fields[1].to_string(), value));
    }
    if !saw_magic {
        return Err(Error::CheckpointMismatch(format!("{path}: empty file")));
    }
    if header.vocab == 0 {
        return Err(Error::CheckpointMismatch(format!(
            "{path}: header missing vocab_size"
        )));
    }
    Ok(header)
}

fn build_table(h: &CkptHeader, path: &str, expect_param_kind: &str) -> Result<ParamTable> {
    let mut table = match h.repr {
        ParamRepr::Tabular => ParamTable::tabular(h.vocab),
        ParamRepr::Linear => {
            if h.table_size == 0 {
                return Err(Error::CheckpointMismatch(format!(
                    "{path}: linear checkpoint missing table_size"
                )));
            }
            ParamTable::linear(h.vocab, h.table_size, h.salt)
        }
    };
    for (pk, key, value) in &h.body {
        if pk != expect_param_kind {
            return Err(Error::CheckpointMismatch(format!(
                "{path}: unexpected param_kind `{pk}` (want `{expect_param_kind}`)"
            )));
        }
        table.set_entry(key, *value)?;
    }
    Ok(table)
}

pub fn save_policy(path: &Path, policy: &PolicyParams) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_table(
        &mut f,
        "policy",
        "policy_logit",
        policy.vocab_size,
        policy.context_order,
        None,
        &policy.table,
    )
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let p = path.display().to_string();
    let h = read_table(f, &p)?;
    if h.kind != "policy" {
        return Err(Error::CheckpointMismatch(format!(
            "{p}: kind `{}` is not a policy checkpoint",
            h.kind
        )));
    }
    let table = build_table(&h, &p, "policy_logit")?;
    Ok(PolicyParams {
        vocab_size: h.vocab,
        context_order: h.context_order,
        table,
    })
}

pub fn save_reward(path: &Path, reward: &RewardParams) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_table(
        &mut f,
        "reward",
        "reward_param",
        reward.vocab_size,
        reward.context_order,
        reward.value_clip,
        &reward.table,
    )
}

pub fn load_reward(path: &Path) -> Result<RewardParams> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let p = path.display().to_string();
    let h = read_table(f, &p)?;
    if h.kind != "reward" {
        return Err(Error::CheckpointMismatch(format!(
            "{p}: kind `{}` is not a reward checkpoint",
            h.kind
        )));
    }
    let table = build_table(&h, &p, "reward_param")?;
    Ok(RewardParams {
        vocab_size: h.vocab,
        context_order: h.context_order,
        value_clip: h.value_clip,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::TaskKind;

    fn bare(vocab: u32, horizon: usize, eos: Option<Token>) -> TokenMdp {
        TokenMdp::bare(vocab, horizon, eos, vec![vec![1]], TaskKind::ParityChain).unwrap()
    }

    fn traj(actions: Vec<Token>) -> Trajectory {
        Trajectory {
            prompt_id: 0,
            actions,
            behavior_logprobs: None,
            outcome: None,
            source: Source::Policy,
        }
    }

    #[test]
    fn uniform_logprob_matches_closed_form() {
        let mdp = bare(4, 3, None);
        let policy = PolicyParams::uniform_tabular(4, 3);
        let lp = policy.policy_logprob(&mdp, &traj(vec![0, 2, 3])).unwrap();
        let expected = 3.0 * (0.25f64).ln();
        assert!((lp - expected).abs() < 1e-12, "{lp} vs {expected}");
        assert!((lp + 4.158883).abs() < 1e-6);
    }

    #[test]
    fn near_deterministic_policy_logprob_is_zero() {
        let mdp = bare(4, 2, None);
        let mut policy = PolicyParams::uniform_tabular(4, 3);
        // Large logit gap on both visited contexts.
        let t = traj(vec![1, 2]);
        for (ctx, &a) in trajectory_contexts(&mdp, &t, 3)
            .unwrap()
            .iter()
            .zip(&t.actions)
        {
            policy.table.add(ctx, a, 60.0);
        }
        let lp = policy.policy_logprob(&mdp, &t).unwrap();
        assert!(lp <= 0.0);
        assert!(lp.abs() < 1e-9, "{lp}");
    }

    #[test]
    fn random_policy_logprob_matches_per_step_recomputation() {
        let mdp = bare(3, 4, Some(0));
        let policy = PolicyParams::random_tabular(&mdp, 3, 2.0, 9).unwrap();
        let t = traj(vec![1, 2, 1, 0]);
        let lp = policy.policy_logprob(&mdp, &t).unwrap();
        // independent per-step oracle
        let mut state = mdp.initial_state(0).unwrap();
        let mut total = 0.0;
        for &a in &t.actions {
            let ctx = mdp.context_key(&state, 3).unwrap();
            let logits = policy.logits(&ctx);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            total += logits[a as usize] - max - z.ln();
            state = mdp.step(&state, a).unwrap();
        }
        assert!((lp - total).abs() < 1e-12);
    }

    #[test]
    fn entropy_values() {
        let mdp = bare(4, 2, None);
        let policy = PolicyParams::uniform_tabular(4, 3);
        let s = State::initial(0);
        let h = policy.entropy(&mdp, &s).unwrap();
        assert!((h - 4.0f64.ln()).abs() < 1e-12);
        assert!((h - 1.386294).abs() < 1e-6);

        // logits (1, 0) over two actions
        let mdp2 = bare(2, 2, None);
        let mut p2 = PolicyParams::uniform_tabular(2, 3);
        let ctx = mdp2.context_key(&State::initial(0), 3).unwrap();
        p2.table.add(&ctx, 0, 1.0);
        let h2 = p2.entropy(&mdp2, &State::initial(0)).unwrap();
        // direct -Σ p log p oracle
        let e = 1f64.exp();
        let probs = [e / (1.0 + e), 1.0 / (1.0 + e)];
        let expected: f64 = -probs.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((h2 - expected).abs() < 1e-12);
        assert!((h2 - 0.582203).abs() < 1e-6);

        // near-deterministic
        let mut p3 = PolicyParams::uniform_tabular(2, 3);
        p3.table.add(&ctx, 0, 50.0);
        assert!(p3.entropy(&mdp2, &State::initial(0)).unwrap() < 1e-9);
    }

    #[test]
    fn sample_rollouts_record_consistent_logprobs() {
        let mdp = bare(3, 4, Some(0));
        let policy = PolicyParams::random_tabular(&mdp, 3, 1.0, 5).unwrap();
        let rollouts = policy.sample_rollouts(&mdp, 0, 4, 77).unwrap();
        assert_eq!(rollouts.len(), 4);
        for r in &rollouts {
            let lps = r.behavior_logprobs.as_ref().unwrap();
            assert_eq!(lps.len(), r.len());
            assert!(lps.iter().all(|lp| *lp <= 0.0));
            let total = policy.policy_logprob(&mdp, r).unwrap();
            assert!((total - lps.iter().sum::<f64>()).abs() < 1e-12);
        }
        // determinism per (seed, prompt, index)
        let again = policy.sample_rollouts(&mdp, 0, 4, 77).unwrap();
        assert_eq!(rollouts, again);
    }

    #[test]
    fn deterministic_policy_rollouts_identical() {
        let mdp = bare(3, 3, Some(0));
        let mut policy = PolicyParams::uniform_tabular(3, 4);
        // force action 1 from every reachable context, then eos
        for ctx in reachable_contexts(&mdp, 4).unwrap() {
            let a = if ctx.len() >= 2 { 0 } else { 1 };
            policy.table.add(&ctx, a, 80.0);
        }
        let rollouts = policy.sample_rollouts(&mdp, 0, 5, 3).unwrap();
        for r in &rollouts {
            assert_eq!(r.actions, rollouts[0].actions);
        }
    }

    #[test]
    fn uniform_rollout_frequencies_match_enumeration() {
        // V=2 no-eos, T=3: 8 sequences, each with probability 1/8.
        let mdp = bare(2, 3, None);
        let policy = PolicyParams::uniform_tabular(2, 3);
        let n = 100_000;
        let rollouts = policy.sample_rollouts(&mdp, 0, n, 123).unwrap();
        let mut counts: BTreeMap<Vec<Token>, usize> = BTreeMap::new();
        for r in rollouts {
            *counts.entry(r.actions).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 8);
        for (_, c) in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.125).abs() < 0.005, "{f}");
        }
    }

    #[test]
    fn prm_score_basics() {
        let mdp = bare(4, 3, None);
        let mut reward = RewardParams::zeros_tabular(4, 3);
        let s = State::initial(0);
        assert_eq!(reward.prm_score(&mdp, &s, 2).unwrap(), 0.0);
        let ctx = mdp.context_key(&s, 3).unwrap();
        reward.table.add(&ctx, 2, 0.7);
        assert_eq!(reward.prm_score(&mdp, &s, 2).unwrap(), 0.7);
        assert!(reward.prm_score(&mdp, &s, 9).is_err());
    }

    #[test]
    fn linear_score_matches_explicit_dot_product() {
        let mdp = bare(4, 3, None);
        let mut table = ParamTable::linear(4, 64, 17);
        // deterministic fill
        if let ParamTable::Linear { weights, .. } = &mut table {
            for (i, w) in weights.iter_mut().enumerate() {
                *w = (i as f64 * 0.37).sin();
            }
        }
        let reward = RewardParams::zeros(4, 2, None, table);
        let s = State {
            prompt_id: 0,
            prefix: vec![3],
            t: 1,
        };
        let got = reward.prm_score(&mdp, &s, 1).unwrap();
        // explicit one-hot dot product: w[h(ctx) * V + a]
        let ctx = mdp.context_key(&s, 2).unwrap();
        let h = (rng::context_hash(17, &ctx) % 64) as usize;
        let feature_index = h * 4 + 1;
        let mut dot = 0.0;
        if let ParamTable::Linear { weights, .. } = &reward.table {
            for (i, w) in weights.iter().enumerate() {
                let x = if i == feature_index { 1.0 } else { 0.0 };
                dot += w * x;
            }
        }
        assert!((got - dot).abs() < 1e-15);
    }

    #[test]
    fn trajectory_reward_sum_and_mean() {
        let mdp = bare(3, 4, None);
        let mut reward = RewardParams::zeros_tabular(3, 3);
        let t = traj(vec![1, 2]);
        for (i, (ctx, &a)) in trajectory_contexts(&mdp, &t, 3)
            .unwrap()
            .iter()
            .zip(&t.actions)
            .enumerate()
        {
            reward.table.add(ctx, a, if i == 0 { 0.2 } else { 0.4 });
        }
        let (sum, mean) = reward.trajectory_reward(&mdp, &t).unwrap();
        assert!((sum - 0.6).abs() < 1e-12);
        assert!((mean - 0.3).abs() < 1e-12);

        let zero = RewardParams::zeros_tabular(3, 3);
        let (s0, m0) = zero.trajectory_reward(&mdp, &t).unwrap();
        assert_eq!((s0, m0), (0.0, 0.0));

        let single = traj(vec![2]);
        let (s1, m1) = reward.trajectory_reward(&mdp, &single).unwrap();
        assert_eq!(s1, m1);

        assert!(matches!(
            reward.trajectory_reward(&mdp, &traj(vec![])),
            Err(Error::EmptyTrajectory)
        ));
    }

    #[test]
    fn value_clip_bounds_scores() {
        let mdp = bare(3, 2, None);
        let mut reward = RewardParams::zeros_tabular(3, 3);
        reward.value_clip = Some(10.0);
        let s = State::initial(0);
        let ctx = mdp.context_key(&s, 3).unwrap();
        reward.table.add(&ctx, 1, 25.0);
        assert_eq!(reward.prm_score(&mdp, &s, 1).unwrap(), 10.0);
        // saturated cell drops out of the gradient
        let cells = reward.grad_cells(&mdp, &traj(vec![1])).unwrap();
        assert!(cells.is_empty());
    }

    #[test]
    fn grad_norm_clipping() {
        let mut g = Gradient::new();
        g.insert(ParamCell::Feat(0), 3.0);
        g.insert(ParamCell::Feat(1), 4.0);
        let norm = clip_grad_norm(&mut g, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grad_l2_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_tabular_and_linear() {
        let dir = tempfile::tempdir().unwrap();
        let mdp = bare(3, 3, Some(0));
        let mut policy = PolicyParams::random_tabular(&mdp, 2, 1.5, 4).unwrap();
        policy.table.add(&[1, 2], 0, 0.123456789012345);
        let ppath = dir.path().join("policy.ckpt");
        save_policy(&ppath, &policy).unwrap();
        let back = load_policy(&ppath).unwrap();
        assert_eq!(back.vocab_size, 3);
        assert_eq!(back.context_order, 2);
        assert_eq!(back.logits(&[1, 2]), policy.logits(&[1, 2]));

        let mut reward = RewardParams::zeros(3, 2, Some(10.0), ParamTable::linear(3, 32, 5));
        reward.table.add(&[2], 1, -1.25);
        let rpath = dir.path().join("reward.ckpt");
        save_reward(&rpath, &reward).unwrap();
        let rback = load_reward(&rpath).unwrap();
        assert_eq!(rback.value_clip, Some(10.0));
        assert_eq!(rback.score_ctx(&[2], 1), -1.25);

        // kind mismatch is rejected
        assert!(load_policy(&rpath).is_err());
    }
}
