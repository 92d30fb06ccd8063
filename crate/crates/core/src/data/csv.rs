//! Trajectory CSV: `traj_id,t,f0..f{D-1},action_iv,action_vaso,reward,outcome`.
//!
//! Floats are written with Rust's shortest round-trip formatting, so
//! `load(save(x)) == x` exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{ActionPair, Outcome, Trajectory};
use crate::error::{Error, Result};

fn header(d: usize) -> String {
    let mut h = String::from("traj_id,t");
    for j in 0..d {
        let _ = write!(h, ",f{j}");
    }
    h.push_str(",action_iv,action_vaso,reward,outcome");
    h
}

pub fn write_trajectories(trajs: &[Trajectory], mut w: impl Write) -> Result<()> {
    let d = trajs.first().map_or(0, Trajectory::state_dim);
    writeln!(w, "{}", header(d))?;
    let mut line = String::new();
    for tr in trajs {
        if tr.id.is_empty() || tr.id.contains([',', '\n', '\r']) {
            return Err(Error::contract(format!("trajectory id {:?} is not CSV-safe", tr.id)));
        }
        if tr.state_dim() != d {
            return Err(Error::shape("write_trajectories", &[d], &[tr.state_dim()]));
        }
        let rewards = tr.rewards();
        let outcome = if tr.outcome.is_positive() { "pos" } else { "neg" };
        for t in 0..tr.len() {
            line.clear();
            let _ = write!(line, "{},{t}", tr.id);
            for v in &tr.states[t] {
                let _ = write!(line, ",{v}");
            }
            let a = tr.actions[t];
            let _ = write!(
                line,
                ",{},{},{},{outcome}",
                a.iv_bin(),
                a.vaso_bin(),
                rewards[t] as i32
            );
            writeln!(w, "{line}")?;
        }
    }
    Ok(())
}

pub fn save_trajectories_csv(trajs: &[Trajectory], path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    write_trajectories(trajs, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Pending {
    id: String,
    states: Vec<Vec<f32>>,
    actions: Vec<ActionPair>,
    outcome: Outcome,
    last_reward: i32,
    last_row: usize,
}

impl Pending {
    fn finish(self) -> Result<Trajectory> {
        let row = self.last_row;
        let expected = if self.outcome.is_positive() { 1 } else { -1 };
        if self.last_reward != expected {
            return Err(Error::Parse {
                row,
                msg: format!(
                    "final reward {} does not match outcome of trajectory {}",
                    self.last_reward, self.id
                ),
            });
        }
        Trajectory::new(self.id, self.states, self.actions, self.outcome).map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })
    }
}

/// Parses trajectories; rows of one trajectory must be contiguous.
/// Row numbers in errors are 1-based file lines (the header is line 1).
pub fn read_trajectories(r: impl Read) -> Result<Vec<Trajectory>> {
    let mut lines = BufReader::new(r).lines();
    let Some(head) = lines.next().transpose()? else {
        return Err(Error::Parse {
            row: 1,
            msg: "missing header".into(),
        });
    };
    let cols: Vec<&str> = head.trim_end().split(',').map(str::trim).collect();
    let n = cols.len();
    if n < 6 {
        return Err(Error::Parse {
            row: 1,
            msg: format!("header has {n} columns"),
        });
    }
    let d = n - 6;
    let expected = header(d);
    if cols.join(",") != expected {
        let missing = expected
            .split(',')
            .zip(cols.iter())
            .find(|(e, c)| e != *c)
            .map_or("?", |(e, _)| e)
            .to_string();
        return Err(Error::Parse {
            row: 1,
            msg: format!("missing or misplaced column `{missing}`"),
        });
    }

    let mut out = Vec::new();
    let mut pending: Option<Pending> = None;
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { row, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != n {
            return Err(bad(format!("expected {n} fields, found {}", fields.len())));
        }
        let id = fields[0];
        let t: usize = fields[1].parse().map_err(|_| bad(format!("bad timestep `{}`", fields[1])))?;
        let mut state = Vec::with_capacity(d);
        for f in &fields[2..2 + d] {
            let v: f32 = f.parse().map_err(|_| bad(format!("bad feature `{f}`")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite feature `{f}`")));
            }
            state.push(v);
        }
        let bin = |s: &str| -> Result<usize> { s.parse().map_err(|_| bad(format!("bad action bin `{s}`"))) };
        let action = ActionPair::new(bin(fields[2 + d])?, bin(fields[3 + d])?).map_err(|e| bad(e.to_string()))?;
        let reward: i32 = fields[4 + d]
            .parse()
            .ok()
            .filter(|r: &i32| (-1..=1).contains(r))
            .ok_or_else(|| bad(format!("reward `{}` not in {{-1, 0, 1}}", fields[4 + d])))?;
        let outcome = match fields[5 + d] {
            "pos" => Outcome::Positive,
            "neg" => Outcome::Negative,
            o => return Err(bad(format!("outcome `{o}` is neither pos nor neg"))),
        };

        let continues = pending.as_ref().is_some_and(|p| p.id == id);
        if continues {
            let p = pending.as_mut().expect("checked");
            if t != p.states.len() {
                return Err(bad(format!("timestep jumps from {} to {t}", p.states.len() - 1)));
            }
            if p.last_reward != 0 {
                return Err(bad(format!("reward {} before the final step", p.last_reward)));
            }
            if p.outcome != outcome {
                return Err(bad("outcome changes within a trajectory".into()));
            }
        } else {
            if let Some(done) = pending.take() {
                out.push(done.finish()?);
            }
            if t != 0 {
                return Err(bad(format!("trajectory {id} starts at t = {t}")));
            }
            if out.iter().any(|tr: &Trajectory| tr.id == id) {
                return Err(bad(format!("rows of trajectory {id} are not contiguous")));
            }
            pending = Some(Pending {
                id: id.to_string(),
                states: Vec::new(),
                actions: Vec::new(),
                outcome,
                last_reward: 0,
                last_row: row,
            });
        }
        let p = pending.as_mut().expect("set above");
        p.states.push(state);
        p.actions.push(action);
        p.last_reward = reward;
        p.last_row = row;
    }
    if let Some(done) = pending {
        out.push(done.finish()?);
    }
    Ok(out)
}

pub fn load_trajectories_csv(path: impl AsRef<Path>) -> Result<Vec<Trajectory>> {
    read_trajectories(fs::File::open(path)?)
}
