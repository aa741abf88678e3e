//! Token-level MDP: states are prompt + generated prefix, actions are
//! vocabulary tokens, transitions append deterministically. An episode ends
//! at the first eos token or at the horizon, whichever comes first.
//!
//! Ships three synthetic reasoning tasks with verifiable outcomes and
//! procedural expert generators:
//!
//! - `parity_chain`: prompt encodes bits; the canonical completion emits the
//!   running parities, repeats the final parity as the answer, then eos.
//! - `arithmetic_chain`: same shape with running sums modulo `vocab - 1`.
//! - `copy_sort`: the completion is the prompt sorted ascending, then eos.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

pub type Token = u32;

/// Default cap on feasible-sequence counts for enumeration-backed oracles.
pub const DEFAULT_ENUM_CAP: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    ParityChain,
    ArithmeticChain,
    CopySort,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::ParityChain => "parity_chain",
            TaskKind::ArithmeticChain => "arithmetic_chain",
            TaskKind::CopySort => "copy_sort",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parity_chain" => Ok(TaskKind::ParityChain),
            "arithmetic_chain" => Ok(TaskKind::ArithmeticChain),
            "copy_sort" => Ok(TaskKind::CopySort),
            other => Err(Error::Config(format!("unknown task_kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub id: u32,
    pub tokens: Vec<Token>,
}

/// Parameters of the dense ground-truth reward attached to synthetic tasks.
/// Used only by task generators and evaluation, never by learners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HiddenReward {
    pub step_bonus: f64,
    pub step_penalty: f64,
    pub answer_bonus: f64,
}

impl Default for HiddenReward {
    fn default() -> Self {
        HiddenReward {
            step_bonus: 1.0,
            step_penalty: -1.0,
            answer_bonus: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct State {
    pub prompt_id: u32,
    pub prefix: Vec<Token>,
    pub t: usize,
}

impl State {
    pub fn initial(prompt_id: u32) -> Self {
        State {
            prompt_id,
            prefix: Vec::new(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Expert,
    Policy,
    Promoted,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Source::Expert => "expert",
            Source::Policy => "policy",
            Source::Promoted => "promoted",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Source::Expert),
            "policy" => Ok(Source::Policy),
            "promoted" => Ok(Source::Promoted),
            other => Err(Error::Config(format!("unknown source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_id: u32,
    pub actions: Vec<Token>,
    pub behavior_logprobs: Option<Vec<f64>>,
    pub outcome: Option<f64>,
    pub source: Source,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TokenMdp {
    pub vocab_size: u32,
    pub horizon: usize,
    pub eos: Option<Token>,
    pub prompts: Vec<Prompt>,
    pub task_kind: TaskKind,
    pub hidden_reward: Option<HiddenReward>,
    prompt_index: BTreeMap<u32, usize>,
}

impl TokenMdp {
    /// Builds an MDP over explicit prompts, without task semantics beyond
    /// `task_kind`. Mostly for oracle tests on small enumerable instances.
    pub fn bare(
        vocab_size: u32,
        horizon: usize,
        eos: Option<Token>,
        prompts: Vec<Vec<Token>>,
        task_kind: TaskKind,
    ) -> Result<Self> {
        let prompts = prompts
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Prompt {
                id: i as u32,
                tokens,
            })
            .collect();
        Self::from_parts(vocab_size, horizon, eos, prompts, task_kind, None)
    }

    /// Builds a synthetic task. The prompt pool is generated exhaustively for
    /// every length `1..=prompt_len`, then subsampled to `num_prompts` by
    /// seeded shuffle.
    pub fn synthetic(
        task_kind: TaskKind,
        vocab_size: u32,
        horizon: usize,
        prompt_len: usize,
        num_prompts: usize,
        seed: u64,
    ) -> Result<Self> {
        let min_vocab = match task_kind {
            TaskKind::ParityChain | TaskKind::ArithmeticChain => 3,
            TaskKind::CopySort => 2,
        };
        if vocab_size < min_vocab {
            return Err(Error::Config(format!(
                "task {task_kind} needs vocab_size >= {min_vocab}, got {vocab_size}"
            )));
        }
        if prompt_len == 0 {
            return Err(Error::Config("prompt_len must be >= 1".into()));
        }
        let needed = match task_kind {
            TaskKind::ParityChain | TaskKind::ArithmeticChain => prompt_len + 2,
            TaskKind::CopySort => prompt_len + 1,
        };
        if horizon < needed {
            return Err(Error::Config(format!(
                "horizon {horizon} too small for prompt_len {prompt_len} (need >= {needed})"
            )));
        }
        let alphabet: Vec<Token> = match task_kind {
            TaskKind::ParityChain => vec![1, 2],
            TaskKind::ArithmeticChain | TaskKind::CopySort => (1..vocab_size).collect(),
        };
        let mut pool: Vec<Vec<Token>> = Vec::new();
        let mut level: Vec<Vec<Token>> = vec![Vec::new()];
        for _ in 0..prompt_len {
            let mut next = Vec::with_capacity(level.len() * alphabet.len());
            for p in &level {
                for &a in &alphabet {
                    let mut q = p.clone();
                    q.push(a);
                    next.push(q);
                }
            }
            pool.extend(next.iter().cloned());
            level = next;
            if pool.len() > 1_000_000 {
                return Err(Error::Config(
                    "prompt pool exceeds 1e6; lower prompt_len or vocab_size".into(),
                ));
            }
        }
        if num_prompts == 0 || num_prompts > pool.len() {
            return Err(Error::Config(format!(
                "num_prompts {num_prompts} outside 1..={}",
                pool.len()
            )));
        }
        let mut rng = rng::stream(&[seed, 0x70726f6d]);
        // Fisher-Yates over the pool, take the first num_prompts.
        for i in (1..pool.len()).rev() {
            let j = rng.gen_range(0..=i);
            pool.swap(i, j);
        }
        let prompts = pool
            .into_iter()
            .take(num_prompts)
            .enumerate()
            .map(|(i, tokens)| Prompt {
                id: i as u32,
                tokens,
            })
            .collect();
        Self::from_parts(
            vocab_size,
            horizon,
            Some(0),
            prompts,
            task_kind,
            Some(HiddenReward::default()),
        )
    }

    fn from_parts(
        vocab_size: u32,
        horizon: usize,
        eos: Option<Token>,
        prompts: Vec<Prompt>,
        task_kind: TaskKind,
        hidden_reward: Option<HiddenReward>,
    ) -> Result<Self> {
        if vocab_size == 0 || vocab_size > 64 {
            return Err(Error::Config(format!(
                "vocab_size must be in 1..=64, got {vocab_size}"
            )));
        }
        if horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if let Some(e) = eos {
            if e >= vocab_size {
                return Err(Error::Config(format!(
                    "eos {e} outside vocabulary 0..{vocab_size}"
                )));
            }
        }
        let mut prompt_index = BTreeMap::new();
        for (i, p) in prompts.iter().enumerate() {
            if prompt_index.insert(p.id, i).is_some() {
                return Err(Error::Config(format!("duplicate prompt id {}", p.id)));
            }
            if let Some(&bad) = p.tokens.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::Config(format!(
                    "prompt {} token {bad} outside vocabulary",
                    p.id
                )));
            }
        }
        Ok(TokenMdp {
            vocab_size,
            horizon,
            eos,
            prompts,
            task_kind,
            hidden_reward,
            prompt_index,
        })
    }

    pub fn prompt(&self, id: u32) -> Result<&Prompt> {
        self.prompt_index
            .get(&id)
            .map(|&i| &self.prompts[i])
            .ok_or(Error::UnknownPrompt(id))
    }

    pub fn prompt_ids(&self) -> Vec<u32> {
        self.prompts.iter().map(|p| p.id).collect()
    }

    pub fn initial_state(&self, prompt_id: u32) -> Result<State> {
        self.prompt(prompt_id)?;
        Ok(State::initial(prompt_id))
    }

    /// Whether the episode at `state` has ended (eos emitted or horizon hit).
    pub fn is_terminal(&self, state: &State) -> bool {
        if state.t >= self.horizon {
            return true;
        }
        match (self.eos, state.prefix.last()) {
            (Some(e), Some(&last)) => last == e,
            _ => false,
        }
    }

    /// Deterministic transition: appends `action`, increments `t`.
    pub fn step(&self, state: &State, action: Token) -> Result<State> {
        if self.is_terminal(state) {
            return Err(Error::StepLimit {
                horizon: self.horizon,
            });
        }
        if action >= self.vocab_size {
            return Err(Error::InvalidAction {
                action,
                vocab_size: self.vocab_size,
            });
        }
        let mut prefix = state.prefix.clone();
        prefix.push(action);
        Ok(State {
            prompt_id: state.prompt_id,
            prefix,
            t: state.t + 1,
        })
    }

    /// Context window: the last `k` tokens of `prompt ‖ prefix`. This is the
    /// state identity used by tabular/linear function approximation; the MDP
    /// itself remains full-prefix.
    pub fn context_key(&self, state: &State, k: usize) -> Result<Vec<Token>> {
        self.context_of(state.prompt_id, &state.prefix, k)
    }

    /// Same as [`context_key`](Self::context_key) without materializing a
    /// `State`.
    pub fn context_of(&self, prompt_id: u32, prefix: &[Token], k: usize) -> Result<Vec<Token>> {
        let prompt = self.prompt(prompt_id)?;
        let total = prompt.tokens.len() + prefix.len();
        let take = k.min(total);
        let mut ctx = Vec::with_capacity(take);
        let start = total - take;
        for i in start..total {
            if i < prompt.tokens.len() {
                ctx.push(prompt.tokens[i]);
            } else {
                ctx.push(prefix[i - prompt.tokens.len()]);
            }
        }
        Ok(ctx)
    }

    /// The canonical correct completion for a prompt, including eos.
    pub fn canonical_completion(&self, prompt: &Prompt) -> Vec<Token> {
        let mut out = match self.task_kind {
            TaskKind::ParityChain => {
                let mut chain = Vec::with_capacity(prompt.tokens.len() + 1);
                let mut parity = 0u32;
                for &tok in &prompt.tokens {
                    parity ^= Self::parity_bit(tok);
                    chain.push(1 + parity);
                }
                let answer = *chain.last().expect("nonempty prompt");
                chain.push(answer);
                chain
            }
            TaskKind::ArithmeticChain => {
                let modulus = (self.vocab_size - 1) as u64;
                let mut chain = Vec::with_capacity(prompt.tokens.len() + 1);
                let mut acc = 0u64;
                for &tok in &prompt.tokens {
                    acc = (acc + (tok as u64 - 1)) % modulus;
                    chain.push(1 + acc as u32);
                }
                let answer = *chain.last().expect("nonempty prompt");
                chain.push(answer);
                chain
            }
            TaskKind::CopySort => {
                let mut sorted = prompt.tokens.clone();
                sorted.sort_unstable();
                sorted
            }
        };
        if let Some(e) = self.eos {
            out.push(e);
        }
        out
    }

    fn parity_bit(token: Token) -> u32 {
        u32::from(token == 2)
    }

    /// Generated tokens with the trailing eos stripped: the answer segment
    /// the verifier inspects.
    pub fn answer_segment<'a>(&self, traj: &'a Trajectory) -> &'a [Token] {
        match self.eos {
            Some(e) => match traj.actions.iter().position(|&t| t == e) {
                Some(pos) => &traj.actions[..pos],
                None => &traj.actions[..],
            },
            None => &traj.actions[..],
        }
    }

    /// Whether the trajectory carries the answer-marker token (eos). MDPs
    /// without eos have no marker and trivially satisfy the format.
    pub fn has_answer_marker(&self, traj: &Trajectory) -> bool {
        match self.eos {
            Some(e) => traj.actions.contains(&e),
            None => true,
        }
    }

    /// Outcome verification: 1 iff the task-specific final answer encoded
    /// before eos is correct. Pure function of (prompt, token sequence).
    pub fn verify_outcome(&self, traj: &Trajectory) -> Result<f64> {
        let prompt = self.prompt(traj.prompt_id)?;
        let segment = self.answer_segment(traj);
        let ok = match self.task_kind {
            TaskKind::ParityChain | TaskKind::ArithmeticChain => {
                let canon = self.canonical_completion(prompt);
                let answer_pos = canon.len() - 1 - usize::from(self.eos.is_some());
                segment.last() == Some(&canon[answer_pos])
            }
            TaskKind::CopySort => {
                let mut sorted = prompt.tokens.clone();
                sorted.sort_unstable();
                segment == sorted.as_slice()
            }
        };
        Ok(if ok { 1.0 } else { 0.0 })
    }

    /// Ground-truth per-token reward, when the task defines one: positional
    /// match against the canonical completion, with a larger bonus on the
    /// answer token.
    pub fn hidden_reward(&self, state: &State, action: Token) -> Option<f64> {
        let hr = self.hidden_reward?;
        let prompt = self.prompt(state.prompt_id).ok()?;
        let canon = self.canonical_completion(prompt);
        let answer_pos = canon.len() - 1 - usize::from(self.eos.is_some());
        let t = state.t;
        Some(if t < canon.len() && action == canon[t] {
            if t == answer_pos {
                hr.answer_bonus
            } else {
                hr.step_bonus
            }
        } else {
            hr.step_penalty
        })
    }

    /// Sum and mean of the hidden reward along a trajectory.
    pub fn hidden_trajectory_score(&self, traj: &Trajectory) -> Option<(f64, f64)> {
        self.hidden_reward?;
        if traj.is_empty() {
            return None;
        }
        let mut state = State::initial(traj.prompt_id);
        let mut sum = 0.0;
        for &a in &traj.actions {
            sum += self.hidden_reward(&state, a)?;
            state = self.step(&state, a).ok()?;
        }
        Some((sum, sum / traj.len() as f64))
    }

    /// k expert trajectories for a prompt; every one verifies correct, none
    /// exposes its sampler. Variation (filler tokens inside the chain) is
    /// seeded and only used when the horizon leaves slack.
    pub fn generate_expert(&self, prompt_id: u32, k: usize, seed: u64) -> Result<Vec<Trajectory>> {
        if k == 0 {
            return Err(Error::Config("expert count k must be >= 1".into()));
        }
        let prompt = self.prompt(prompt_id)?;
        let canon = self.canonical_completion(prompt);
        let mut out = Vec::with_capacity(k);
        for j in 0..k {
            let mut r = rng::stream(&[seed, 0x657870, prompt_id as u64, j as u64]);
            let actions = match self.task_kind {
                TaskKind::ParityChain if self.vocab_size > 3 => {
                    let slack = self.horizon - canon.len();
                    let n_fill = if slack == 0 {
                        0
                    } else {
                        r.gen_range(0..=slack.min(2))
                    };
                    let chain_len = canon.len() - 1 - usize::from(self.eos.is_some());
                    let mut chain: Vec<Token> = canon[..chain_len].to_vec();
                    for _ in 0..n_fill {
                        let pos = r.gen_range(0..=chain.len());
                        let filler = r.gen_range(3..self.vocab_size);
                        chain.insert(pos, filler);
                    }
                    chain.extend_from_slice(&canon[chain_len..]);
                    chain
                }
                _ => canon.clone(),
            };
            let traj = Trajectory {
                prompt_id,
                actions,
                behavior_logprobs: None,
                outcome: Some(1.0),
                source: Source::Expert,
            };
            debug_assert_eq!(self.verify_outcome(&traj)?, 1.0);
            out.push(traj);
        }
        Ok(out)
    }

    /// Closed-form count of feasible sequences: `N(t) = 1 + (V-1) N(t-1)`
    /// with `N(0) = 1` when an eos token exists, `V^T` otherwise.
    pub fn feasible_count(&self) -> u128 {
        let v = self.vocab_size as u128;
        match self.eos {
            Some(_) => {
                let mut n: u128 = 1;
                for _ in 0..self.horizon {
                    n = 1 + (v - 1) * n;
                }
                n
            }
            None => v.pow(self.horizon as u32),
        }
    }

    pub fn enumerate_trajectories(&self, prompt_id: u32) -> Result<Vec<Trajectory>> {
        self.enumerate_trajectories_capped(prompt_id, DEFAULT_ENUM_CAP)
    }

    /// All feasible token sequences for a prompt (terminating at eos or at
    /// horizon), each exactly once, in depth-first token order.
    pub fn enumerate_trajectories_capped(
        &self,
        prompt_id: u32,
        cap: u64,
    ) -> Result<Vec<Trajectory>> {
        self.prompt(prompt_id)?;
        let count = self.feasible_count();
        if count > cap as u128 {
            return Err(Error::EnumerationTooLarge { states: count, cap });
        }
        let mut out = Vec::with_capacity(count as usize);
        let mut current: Vec<Token> = Vec::with_capacity(self.horizon);
        self.enumerate_rec(prompt_id, &mut current, &mut out);
        Ok(out)
    }

    fn enumerate_rec(&self, prompt_id: u32, current: &mut Vec<Token>, out: &mut Vec<Trajectory>) {
        let done = current.len() >= self.horizon
            || matches!((self.eos, current.last()), (Some(e), Some(&l)) if l == e);
        if done {
            out.push(Trajectory {
                prompt_id,
                actions: current.clone(),
                behavior_logprobs: None,
                outcome: None,
                source: Source::Policy,
            });
            return;
        }
        for a in 0..self.vocab_size {
            current.push(a);
            self.enumerate_rec(prompt_id, current, out);
            current.pop();
        }
    }
}

/// Writes trajectories in the line-delimited dataset format:
/// `prompt_id<TAB>tokens<TAB>outcome<TAB>source[<TAB>logprobs]`.
pub fn write_trajectories<W: Write>(w: &mut W, trajectories: &[Trajectory]) -> Result<()> {
    writeln!(w, "# prm-irl trajectories v1")?;
    for t in trajectories {
        let outcome = t.outcome.ok_or_else(|| {
            Error::Config("cannot serialize a trajectory with unverified outcome".into())
        })?;
        let tokens = join_space(t.actions.iter());
        write!(w, "{}\t{}\t{}\t{}", t.prompt_id, tokens, outcome as i64, t.source)?;
        if let Some(lp) = &t.behavior_logprobs {
            write!(w, "\t{}", join_space(lp.iter()))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn write_trajectories_file(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_trajectories(&mut f, trajectories)
}

pub fn read_trajectories<R: BufRead>(r: R, path: &str) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < 4 || fields.len() > 5 {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno,
                msg: format!("expected 4 or 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.into(),
            line: lineno,
            msg,
        };
        let prompt_id: u32 = fields[0]
            .parse()
            .map_err(|e| parse_err(format!("prompt_id: {e}")))?;
        let actions = split_space::<Token>(fields[1])
            .map_err(|e| parse_err(format!("tokens: {e}")))?;
        let outcome: f64 = fields[2]
            .parse()
            .map_err(|e| parse_err(format!("outcome: {e}")))?;
        if outcome != 0.0 && outcome != 1.0 {
            return Err(parse_err(format!("outcome must be 0 or 1, got {outcome}")));
        }
        let source: Source = fields[3].parse().map_err(|e| parse_err(format!("{e}")))?;
        let behavior_logprobs = if fields.len() == 5 {
            let lp = split_space::<f64>(fields[4])
                .map_err(|e| parse_err(format!("logprobs: {e}")))?;
            if lp.len() != actions.len() {
                return Err(parse_err(format!(
                    "logprobs length {} != tokens length {}",
                    lp.len(),
                    actions.len()
                )));
            }
            Some(lp)
        } else {
            None
        };
        out.push(Trajectory {
            prompt_id,
            actions,
            behavior_logprobs,
            outcome: Some(outcome),
            source,
        });
    }
    Ok(out)
}

pub fn read_trajectories_file(path: &Path) -> Result<Vec<Trajectory>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_trajectories(f, &path.display().to_string())
}

fn join_space<T: fmt::Display>(items: impl Iterator<Item = T>) -> String {
    let mut s = String::new();
    for (i, it) in items.enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&it.to_string());
    }
    s
}

fn split_space<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(' ')
        .map(|p| p.parse::<T>().map_err(|e| e.to_string()))
        .collect()
}
