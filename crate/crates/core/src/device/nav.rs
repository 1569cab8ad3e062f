use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::DeviceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    /// BFS expansion order.
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            Heading::N => (-1, 0),
            Heading::E => (0, 1),
            Heading::S => (1, 0),
            Heading::W => (0, -1),
        }
    }

    pub fn right(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    pub fn left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    pub fn around(self) -> Self {
        Self::from_index(self.index() + 2)
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Agent {
    pub r: usize,
    pub c: usize,
    pub heading: Heading,
}

/// Occupancy grid with the wearer's pose and named waypoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridWorld {
    pub width: usize,
    pub height: usize,
    pub walls: Vec<[usize; 2]>,
    pub agent: Agent,
    pub waypoints: BTreeMap<String, [usize; 2]>,
}

/// Waypoints whose name starts with this are failsafe destinations.
pub const SAFE_PLACE: &str = "safe place";

impl GridWorld {
    pub fn from_json(text: &str) -> Result<Self, DeviceError> {
        let world: Self = serde_json::from_str(text).map_err(|e| DeviceError::InvalidWorld(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let bad = |m: String| Err(DeviceError::InvalidWorld(m));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be at least 1x1".into());
        }
        if let Some(w) = self.walls.iter().find(|w| !self.in_bounds(w[0], w[1])) {
            return bad(format!("wall {w:?} is outside the grid"));
        }
        let Agent { r, c, .. } = self.agent;
        if !self.is_free(r, c) {
            return bad(format!("agent cell ({r}, {c}) is blocked or outside the grid"));
        }
        for (name, [r, c]) in &self.waypoints {
            if name.trim().is_empty() {
                return bad("waypoint names must be non-empty".into());
            }
            if !self.is_free(*r, *c) {
                return bad(format!("waypoint {name:?} at ({r}, {c}) is blocked or outside the grid"));
            }
        }
        Ok(())
    }

    pub fn in_bounds(&self, r: usize, c: usize) -> bool {
        r < self.height && c < self.width
    }

    pub fn is_wall(&self, r: usize, c: usize) -> bool {
        self.walls.iter().any(|w| w[0] == r && w[1] == c)
    }

    pub fn is_free(&self, r: usize, c: usize) -> bool {
        self.in_bounds(r, c) && !self.is_wall(r, c)
    }

    /// The free neighbor of `(r, c)` in direction `h`, if any.
    pub fn step(&self, r: usize, c: usize, h: Heading) -> Option<(usize, usize)> {
        let (dr, dc) = h.delta();
        let nr = r.checked_add_signed(dr)?;
        let nc = c.checked_add_signed(dc)?;
        self.is_free(nr, nc).then_some((nr, nc))
    }

    /// Free cells between the agent and the first wall or grid edge ahead.
    pub fn clearance_ahead(&self) -> usize {
        let Agent { mut r, mut c, heading } = self.agent;
        let mut n = 0;
        while let Some((nr, nc)) = self.step(r, c, heading) {
            (r, c) = (nr, nc);
            n += 1;
        }
        n
    }

    fn grid<T: Clone>(&self, v: T) -> Vec<Vec<T>> {
        vec![vec![v; self.width]; self.height]
    }

    /// Shortest path from the agent to `goal` as a list of moves, exploring
    /// neighbors in N, E, S, W order.
    pub fn shortest_path(&self, goal: (usize, usize)) -> Option<Vec<Heading>> {
        let start = (self.agent.r, self.agent.c);
        let mut came: Vec<Vec<Option<Heading>>> = self.grid(None);
        let mut seen = self.grid(false);
        seen[start.0][start.1] = true;
        let mut queue = VecDeque::from([start]);
        while let Some((r, c)) = queue.pop_front() {
            if (r, c) == goal {
                let mut moves = Vec::new();
                let (mut r, mut c) = goal;
                while (r, c) != start {
                    let h = came[r][c].expect("visited cells have a parent move");
                    moves.push(h);
                    let (dr, dc) = h.around().delta();
                    r = r.wrapping_add_signed(dr);
                    c = c.wrapping_add_signed(dc);
                }
                moves.reverse();
                return Some(moves);
            }
            for h in Heading::ALL {
                if let Some((nr, nc)) = self.step(r, c, h) {
                    if !seen[nr][nc] {
                        seen[nr][nc] = true;
                        came[nr][nc] = Some(h);
                        queue.push_back((nr, nc));
                    }
                }
            }
        }
        None
    }

    /// BFS distance from the agent to every free cell.
    pub fn distances(&self) -> Vec<Vec<Option<usize>>> {
        let mut dist = self.grid(None);
        let start = (self.agent.r, self.agent.c);
        dist[start.0][start.1] = Some(0);
        let mut queue = VecDeque::from([start]);
        while let Some((r, c)) = queue.pop_front() {
            let d = dist[r][c].expect("queued cells have a distance");
            for h in Heading::ALL {
                if let Some((nr, nc)) = self.step(r, c, h) {
                    if dist[nr][nc].is_none() {
                        dist[nr][nc] = Some(d + 1);
                        queue.push_back((nr, nc));
                    }
                }
            }
        }
        dist
    }

    /// The reachable "safe place…" waypoint closest by path length, ties by
    /// name.
    pub fn nearest_safe_place(&self) -> Option<&str> {
        let dist = self.distances();
        self.waypoints
            .iter()
            .filter(|(name, _)| name.starts_with(SAFE_PLACE))
            .filter_map(|(name, [r, c])| dist[*r][*c].map(|d| (d, name.as_str())))
            .min()
            .map(|(_, name)| name)
    }

    /// A small demo world: a room with an inner wall, a front door and a
    /// safe place.
    pub fn demo() -> Self {
        let mut walls = Vec::new();
        for r in 2..12 {
            walls.push([r, 8]);
        }
        for c in 3..8 {
            walls.push([11, c]);
        }
        Self {
            width: 16,
            height: 16,
            walls,
            agent: Agent {
                r: 8,
                c: 2,
                heading: Heading::N,
            },
            waypoints: BTreeMap::from([
                ("the front door".to_string(), [0, 15]),
                ("the kitchen".to_string(), [14, 12]),
                ("safe place".to_string(), [15, 0]),
            ]),
        }
    }
}

pub const ARRIVED: &str = "you have arrived";

fn turn(from: Heading, to: Heading) -> Option<&'static str> {
    if from == to {
        None
    } else if from.right() == to {
        Some("turn right")
    } else if from.left() == to {
        Some("turn left")
    } else {
        Some("turn around")
    }
}

/// Spoken-style instructions to waypoint `dest`.
pub fn plan_route(world: &GridWorld, dest: &str) -> Result<Vec<String>, DeviceError> {
    let &[r, c] = world
        .waypoints
        .get(dest)
        .ok_or_else(|| DeviceError::UnknownWaypoint(dest.to_string()))?;
    let moves = world
        .shortest_path((r, c))
        .ok_or_else(|| DeviceError::NoPath(dest.to_string()))?;
    let mut out = Vec::new();
    let mut heading = world.agent.heading;
    let mut i = 0;
    while i < moves.len() {
        let dir = moves[i];
        let run = moves[i..].iter().take_while(|&&m| m == dir).count();
        if let Some(t) = turn(heading, dir) {
            out.push(t.to_string());
        }
        heading = dir;
        out.push(if run == 1 {
            "forward 1 step".to_string()
        } else {
            format!("forward {run} steps")
        });
        i += run;
    }
    out.push(ARRIVED.to_string());
    Ok(out)
}

/// Executes instructions from the agent's pose; returns the final pose.
/// Errors if a move would leave the free cells or an instruction is not
/// recognised.
pub fn replay(world: &GridWorld, instructions: &[String]) -> Result<Agent, String> {
    let mut a = world.agent;
    for ins in instructions {
        match ins.as_str() {
            "turn left" => a.heading = a.heading.left(),
            "turn right" => a.heading = a.heading.right(),
            "turn around" => a.heading = a.heading.around(),
            ARRIVED => {}
            other => {
                let n: usize = other
                    .strip_prefix("forward ")
                    .and_then(|rest| rest.split_whitespace().next())
                    .and_then(|n| n.parse().ok())
                    .ok_or_else(|| format!("unrecognised instruction {other:?}"))?;
                for _ in 0..n {
                    let (r, c) = world
                        .step(a.r, a.c, a.heading)
                        .ok_or_else(|| format!("blocked moving {} from ({}, {})", a.heading, a.r, a.c))?;
                    a.r = r;
                    a.c = c;
                }
            }
        }
    }
    Ok(a)
}
