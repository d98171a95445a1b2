//! Line-delimited JSON episode traces and their text rendering.
//!
//! The first line is a header describing the board; every following line is
//! one step: the world digest after the step, the actions taken, the reward
//! and the teams that were in force.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Action, EntityKind, World};
use crate::error::{Error, Result};
use crate::matching::Grouping;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum TraceRecord {
    Header {
        grid: usize,
        kinds: Vec<EntityKind>,
        positions: Vec<(i32, i32)>,
    },
    Step {
        t: usize,
        digest: String,
        actions: Vec<Action>,
        reward: f64,
        grouping: Grouping,
        positions: Vec<(i32, i32)>,
        alive: Vec<bool>,
    },
}

impl TraceRecord {
    pub fn header(world: &World) -> Self {
        TraceRecord::Header {
            grid: world.config().grid,
            kinds: world.kinds().to_vec(),
            positions: world.positions().to_vec(),
        }
    }

    /// Record for a step that has just been applied to `world`.
    pub fn step(world: &World, actions: &[Action], reward: f64, grouping: &Grouping) -> Self {
        TraceRecord::Step {
            t: world.timestep(),
            digest: format!("{:016x}", world.digest()),
            actions: actions.to_vec(),
            reward,
            grouping: grouping.clone(),
            positions: world.positions().to_vec(),
            alive: world.alive().to_vec(),
        }
    }
}

pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &TraceRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn read_trace(input: impl BufRead) -> Result<Vec<TraceRecord>> {
    let mut records = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("trace line {}: {e}", n + 1)))?,
        );
    }
    Ok(records)
}

fn glyph(kind: EntityKind, index: usize) -> char {
    match kind {
        EntityKind::Leader => char::from(b'A' + (index % 26) as u8),
        EntityKind::Follower => char::from_digit((index % 10) as u32, 10).unwrap_or('?'),
        EntityKind::Target => 'T',
        EntityKind::Hazard => 'X',
    }
}

fn draw(
    out: &mut String,
    grid: usize,
    kinds: &[EntityKind],
    positions: &[(i32, i32)],
    alive: &[bool],
) {
    let mut board = vec![vec!['.'; grid]; grid];
    for (e, (&kind, &(x, y))) in kinds.iter().zip(positions).enumerate() {
        if alive.get(e).copied().unwrap_or(true) && x >= 0 && y >= 0 {
            if let Some(c) = board
                .get_mut(y as usize)
                .and_then(|r| r.get_mut(x as usize))
            {
                *c = glyph(kind, e);
            }
        }
    }
    for row in board {
        out.extend(row);
        out.push('\n');
    }
}

/// Renders every frame as text. Leaders are letters, followers digits
/// (their agent index), targets `T`, hazards `X`.
pub fn render(records: &[TraceRecord]) -> Result<String> {
    let Some(TraceRecord::Header {
        grid,
        kinds,
        positions,
    }) = records.first()
    else {
        return Err(Error::Parse("trace does not start with a header".into()));
    };
    let mut out = String::new();
    out.push_str("t=0\n");
    draw(&mut out, *grid, kinds, positions, &[]);
    for r in &records[1..] {
        match r {
            TraceRecord::Step {
                t,
                digest,
                actions,
                reward,
                grouping,
                positions,
                alive,
            } => {
                let teams: Vec<String> = grouping
                    .teams
                    .iter()
                    .map(|tm| format!("{}:{:?}", tm.leader, tm.followers))
                    .collect();
                let _ = writeln!(
                    out,
                    "\nt={t} reward={reward:.2} digest={digest} actions={actions:?} teams=[{}]",
                    teams.join(" ")
                );
                draw(&mut out, *grid, kinds, positions, alive);
            }
            TraceRecord::Header { .. } => {
                return Err(Error::Parse("header repeated inside trace".into()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::WorldConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_and_render() {
        let cfg = WorldConfig::default();
        let mut w = World::reset_with_agents(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut writer = TraceWriter::new(Vec::new());
        writer.write(&TraceRecord::header(&w)).unwrap();
        let acts = [Action::Up, Action::Stay, Action::Left];
        let r = w.step(&acts).unwrap();
        writer
            .write(&TraceRecord::step(&w, &acts, r.reward, w.grouping()))
            .unwrap();
        let bytes = writer.into_inner();
        let records = read_trace(&bytes[..]).unwrap();
        assert_eq!(records.len(), 2);
        let text = render(&records).unwrap();
        assert!(text.contains("t=1 reward=-0.01"));
        assert_eq!(text.matches('A').count(), 2);
    }

    #[test]
    fn missing_header_is_an_error() {
        assert!(render(&[]).is_err());
    }
}
