//! Fixed transition datasets and their CSV + JSON-sidecar persistence.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NopgError, Result};

/// `n` transitions `(s, a, r, s′, terminal)` with optional behavior log-densities
/// and trajectory bookkeeping. Points are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    state_dim: usize,
    action_dim: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    next_states: Vec<f64>,
    terminal: Vec<bool>,
    behavior_logp: Option<Vec<f64>>,
    /// `(trajectory id, step index)` per row.
    trajectory: Option<Vec<(usize, usize)>>,
}

/// One row, used while building a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
    pub behavior_logp: Option<f64>,
    pub trajectory: Option<(usize, usize)>,
}

impl TransitionDataset {
    pub fn empty(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_states: Vec::new(),
            terminal: Vec::new(),
            behavior_logp: None,
            trajectory: None,
        }
    }

    /// Builds a dataset from rows. Optional columns must be present on every
    /// row or on none.
    pub fn from_transitions(state_dim: usize, action_dim: usize, rows: &[Transition]) -> Result<Self> {
        let mut ds = Self::empty(state_dim, action_dim);
        let with_logp = rows.first().is_some_and(|r| r.behavior_logp.is_some());
        let with_traj = rows.first().is_some_and(|r| r.trajectory.is_some());
        if with_logp {
            ds.behavior_logp = Some(Vec::with_capacity(rows.len()));
        }
        if with_traj {
            ds.trajectory = Some(Vec::with_capacity(rows.len()));
        }
        for row in rows {
            ds.push(row.clone())?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, row: Transition) -> Result<()> {
        if row.state.len() != self.state_dim || row.next_state.len() != self.state_dim {
            return Err(NopgError::DimensionMismatch {
                expected: self.state_dim,
                got: row.state.len(),
                context: "dataset state",
            });
        }
        if row.action.len() != self.action_dim {
            return Err(NopgError::DimensionMismatch {
                expected: self.action_dim,
                got: row.action.len(),
                context: "dataset action",
            });
        }
        let first = self.is_empty();
        match (&mut self.behavior_logp, row.behavior_logp) {
            (Some(col), Some(v)) => col.push(v),
            (None, None) => {}
            (None, Some(v)) if first => self.behavior_logp = Some(vec![v]),
            _ => {
                return Err(NopgError::InvalidDataset(
                    "behavior_logp present on some rows only".into(),
                ))
            }
        }
        match (&mut self.trajectory, row.trajectory) {
            (Some(col), Some(v)) => col.push(v),
            (None, None) => {}
            (None, Some(v)) if first => self.trajectory = Some(vec![v]),
            _ => {
                return Err(NopgError::InvalidDataset(
                    "trajectory ids present on some rows only".into(),
                ))
            }
        }
        self.states.extend_from_slice(&row.state);
        self.actions.extend_from_slice(&row.action);
        self.rewards.push(row.reward);
        self.next_states.extend_from_slice(&row.next_state);
        self.terminal.push(row.terminal);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn action(&self, i: usize) -> &[f64] {
        &self.actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn next_state(&self, i: usize) -> &[f64] {
        &self.next_states[i * self.state_dim..(i + 1) * self.state_dim]
    }

    pub fn reward(&self, i: usize) -> f64 {
        self.rewards[i]
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn is_terminal(&self, i: usize) -> bool {
        self.terminal[i]
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminal
    }

    pub fn states_flat(&self) -> &[f64] {
        &self.states
    }

    pub fn actions_flat(&self) -> &[f64] {
        &self.actions
    }

    pub fn next_states_flat(&self) -> &[f64] {
        &self.next_states
    }

    pub fn behavior_logp(&self) -> Option<&[f64]> {
        self.behavior_logp.as_deref()
    }

    pub fn trajectory_index(&self) -> Option<&[(usize, usize)]> {
        self.trajectory.as_deref()
    }

    pub fn row(&self, i: usize) -> Transition {
        Transition {
            state: self.state(i).to_vec(),
            action: self.action(i).to_vec(),
            reward: self.rewards[i],
            next_state: self.next_state(i).to_vec(),
            terminal: self.terminal[i],
            behavior_logp: self.behavior_logp.as_ref().map(|v| v[i]),
            trajectory: self.trajectory.as_ref().map(|v| v[i]),
        }
    }

    pub fn states_vec(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.state(i).to_vec()).collect()
    }

    pub fn actions_vec(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.action(i).to_vec()).collect()
    }

    /// Largest reward magnitude in the data.
    pub fn max_abs_reward(&self) -> f64 {
        self.rewards.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// Rows reordered by `perm` (row `k` of the result is row `perm[k]` here).
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(NopgError::InvalidInput(
                "permutation length differs from dataset length".into(),
            ));
        }
        let rows: Vec<Transition> = perm.iter().map(|&i| self.row(i)).collect();
        let mut ds = Self::from_transitions(self.state_dim, self.action_dim, &rows)?;
        if rows.is_empty() {
            ds.behavior_logp = self.behavior_logp.clone();
            ds.trajectory = self.trajectory.clone();
        }
        Ok(ds)
    }

    /// First `n` rows.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            states: self.states[..n * self.state_dim].to_vec(),
            actions: self.actions[..n * self.action_dim].to_vec(),
            rewards: self.rewards[..n].to_vec(),
            next_states: self.next_states[..n * self.state_dim].to_vec(),
            terminal: self.terminal[..n].to_vec(),
            behavior_logp: self.behavior_logp.as_ref().map(|v| v[..n].to_vec()),
            trajectory: self.trajectory.as_ref().map(|v| v[..n].to_vec()),
        }
    }

    /// Checks finiteness and the reward bound.
    pub fn validate(&self, reward_bound: f64) -> Result<()> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if !(finite(&self.states) && finite(&self.actions) && finite(&self.rewards) && finite(&self.next_states)) {
            return Err(NopgError::InvalidDataset("non-finite entries".into()));
        }
        if let Some(logp) = &self.behavior_logp {
            if !finite(logp) {
                return Err(NopgError::InvalidDataset("non-finite behavior log-density".into()));
            }
        }
        if self.max_abs_reward() > reward_bound {
            return Err(NopgError::InvalidDataset(format!(
                "reward magnitude {} exceeds declared bound {reward_bound}",
                self.max_abs_reward()
            )));
        }
        Ok(())
    }

    /// Rows grouped per trajectory, ordered by step. Requires trajectory ids.
    pub fn trajectories(&self) -> Option<Vec<Vec<usize>>> {
        let index = self.trajectory.as_ref()?;
        let mut ids: Vec<usize> = index.iter().map(|(t, _)| *t).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); ids.len()];
        for (row, (t, _)) in index.iter().enumerate() {
            let g = ids.binary_search(t).expect("id present");
            groups[g].push(row);
        }
        for g in &mut groups {
            g.sort_by_key(|&row| index[row].1);
        }
        Some(groups)
    }

    /// CSV header row.
    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = Vec::new();
        cols.extend((0..self.state_dim).map(|i| format!("s{i}")));
        cols.extend((0..self.action_dim).map(|i| format!("a{i}")));
        cols.push("r".into());
        cols.extend((0..self.state_dim).map(|i| format!("sn{i}")));
        cols.extend(["terminal", "behavior_logp", "traj_id", "step"].map(String::from));
        cols.join(",")
    }

    /// Writes the CSV body; `comment` lines are emitted first, each prefixed by `# `.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(comment) = comment {
            for line in comment.lines() {
                writeln!(out, "# {line}")?;
            }
        }
        writeln!(out, "{}", self.csv_header())?;
        let mut line = String::new();
        for i in 0..self.len() {
            line.clear();
            let mut push = |x: f64| {
                write!(line, "{},", format_float(x)).unwrap();
            };
            self.state(i).iter().for_each(|x| push(*x));
            self.action(i).iter().for_each(|x| push(*x));
            push(self.rewards[i]);
            self.next_state(i).iter().for_each(|x| push(*x));
            write!(line, "{},", u8::from(self.terminal[i])).unwrap();
            if let Some(logp) = &self.behavior_logp {
                line.push_str(&format_float(logp[i]));
            }
            line.push(',');
            if let Some(traj) = &self.trajectory {
                write!(line, "{},{}", traj[i].0, traj[i].1).unwrap();
            } else {
                line.push(',');
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Reads a CSV written by [`write_csv`](Self::write_csv). Lines starting with `#` are skipped.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let reader = BufReader::new(input);
        let mut lines = reader
            .lines()
            .filter(|l| !matches!(l, Ok(s) if s.starts_with('#') || s.trim().is_empty()));
        let header = lines
            .next()
            .ok_or_else(|| NopgError::Parse("missing CSV header".into()))??;
        let cols: Vec<&str> = header.split(',').collect();
        let state_dim = cols
            .iter()
            .filter(|c| c.starts_with('s') && !c.starts_with("sn") && *c != &"step")
            .count();
        let action_dim = cols.iter().filter(|c| c.starts_with('a')).count();
        let mut ds = Self::empty(state_dim, action_dim);
        if header != ds.csv_header() {
            return Err(NopgError::Parse(format!("unexpected CSV header: {header}")));
        }
        let width = cols.len();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(NopgError::Parse(format!(
                    "row {lineno}: expected {width} fields, got {}",
                    fields.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| NopgError::Parse(format!("row {lineno}: bad number {s:?}: {e}")))
            };
            let mut k = 0;
            let mut take = |count: usize| -> Result<Vec<f64>> {
                let v = fields[k..k + count].iter().map(|s| num(s)).collect::<Result<Vec<_>>>();
                k += count;
                v
            };
            let state = take(state_dim)?;
            let action = take(action_dim)?;
            let reward = take(1)?[0];
            let next_state = take(state_dim)?;
            let base = 2 * state_dim + action_dim + 1;
            let terminal = match fields[base].trim() {
                "0" => false,
                "1" => true,
                other => return Err(NopgError::Parse(format!("row {lineno}: bad terminal flag {other:?}"))),
            };
            fn opt(s: &str) -> Option<&str> {
                Some(s.trim()).filter(|s| !s.is_empty())
            }
            let behavior_logp = opt(fields[base + 1]).map(num).transpose()?;
            let traj = match (opt(fields[base + 2]), opt(fields[base + 3])) {
                (Some(t), Some(s)) => Some((
                    t.parse::<usize>().map_err(|e| NopgError::Parse(e.to_string()))?,
                    s.parse::<usize>().map_err(|e| NopgError::Parse(e.to_string()))?,
                )),
                (None, None) => None,
                _ => return Err(NopgError::Parse(format!("row {lineno}: incomplete trajectory index"))),
            };
            ds.push(Transition {
                state,
                action,
                reward,
                next_state,
                terminal,
                behavior_logp,
                trajectory: traj,
            })?;
        }
        Ok(ds)
    }

    pub fn save_csv(&self, path: &Path, comment: Option<&str>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut writer = std::io::BufWriter::new(file);
        self.write_csv(&mut writer, comment)?;
        writer.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// 17 significant digits in scientific notation.
pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// JSON sidecar written next to every dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub environment: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub seed: u64,
    pub rows: usize,
    pub generator: serde_json::Value,
    #[serde(default)]
    pub config_hash: Option<String>,
}

impl DatasetMetadata {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
