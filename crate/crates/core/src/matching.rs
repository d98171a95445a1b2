//! Bilateral team formation between leaders and followers.
//!
//! Agents `0..L` are leaders and `L..A` are followers. Each agent ranks the
//! other side by its row of the preference matrix (higher score first, ties
//! toward the lower index). Two matchers are provided:
//!
//! * [`oom_match`]: many-to-one deferred acceptance with leaders proposing.
//!   Uses only the order of the scores and always returns a stable grouping.
//! * [`som_match`]: followers, in index order, greedily join the free leader
//!   with the highest mutual score `S[f][l] + S[l][f]`. Not stable in general.
//!
//! [`find_blocking_pairs`] and [`enumerate_stable_matchings`] are exhaustive
//! checkers used to certify the output of both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square agent-by-agent score matrix with the leader count.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceMatrix {
    agents: usize,
    leaders: usize,
    scores: Vec<f64>,
}

/// Scores as nested rows or one flat row-major list.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RecordScores {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PreferenceRecord {
    agents: usize,
    leaders: usize,
    scores: RecordScores,
}

impl PreferenceRecord {
    fn into_matrix(self, leaders: Option<usize>) -> Result<PreferenceMatrix> {
        let scores = match self.scores {
            RecordScores::Flat(s) => s,
            RecordScores::Rows(rows) => {
                if rows.len() != self.agents || rows.iter().any(|r| r.len() != self.agents) {
                    return Err(Error::Parse(format!(
                        "score rows do not form a {0}×{0} matrix",
                        self.agents
                    )));
                }
                rows.concat()
            }
        };
        PreferenceMatrix::new(self.agents, leaders.unwrap_or(self.leaders), scores)
    }
}

impl PreferenceMatrix {
    /// Validates finite scores, `leaders >= 1` and `leaders <= agents - leaders`.
    pub fn new(agents: usize, leaders: usize, scores: Vec<f64>) -> Result<Self> {
        let m = Self::for_survivors(agents, leaders, scores)?;
        if leaders > agents - leaders {
            return Err(Error::contract(format!(
                "{leaders} leaders exceed {} followers",
                agents - leaders
            )));
        }
        Ok(m)
    }

    /// Like [`PreferenceMatrix::new`] but allows fewer followers than
    /// leaders, which happens when re-matching after agents are eliminated.
    pub fn for_survivors(agents: usize, leaders: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != agents * agents {
            return Err(Error::Dimension {
                op: "preference_matrix",
                left: vec![agents, agents],
                right: vec![scores.len()],
            });
        }
        if leaders == 0 || leaders > agents {
            return Err(Error::contract(format!(
                "leader count {leaders} invalid for {agents} agents"
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::contract("preference scores must be finite"));
        }
        Ok(Self {
            agents,
            leaders,
            scores,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], leaders: usize) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Parse("preference matrix must be square".into()));
        }
        Self::new(n, leaders, rows.concat())
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn leaders(&self) -> usize {
        self.leaders
    }

    pub fn followers(&self) -> usize {
        self.agents - self.leaders
    }

    pub fn score(&self, from: usize, to: usize) -> f64 {
        self.scores[from * self.agents + to]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Applies `f` to every score.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::for_survivors(
            self.agents,
            self.leaders,
            self.scores.iter().map(|&s| f(s)).collect(),
        )
    }

    /// Restriction to `keep` (ascending agent indices). Leaders among `keep`
    /// stay first because leader indices are the smallest.
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let leaders = keep.iter().filter(|&&a| a < self.leaders).count();
        let scores = keep
            .iter()
            .flat_map(|&i| keep.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.score(i, j))
            .collect();
        Self::for_survivors(keep.len(), leaders, scores)
    }

    /// Followers in `leader`'s order of preference.
    pub fn leader_ranking(&self, leader: usize) -> Vec<usize> {
        let mut fs: Vec<usize> = (self.leaders..self.agents).collect();
        // stable sort keeps lower indices first among ties
        fs.sort_by(|&a, &b| self.score(leader, b).total_cmp(&self.score(leader, a)));
        fs
    }

    /// Leaders in `follower`'s order of preference.
    pub fn follower_ranking(&self, follower: usize) -> Vec<usize> {
        let mut ls: Vec<usize> = (0..self.leaders).collect();
        ls.sort_by(|&a, &b| self.score(follower, b).total_cmp(&self.score(follower, a)));
        ls
    }

    pub fn mutual_score(&self, follower: usize, leader: usize) -> f64 {
        self.score(follower, leader) + self.score(leader, follower)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&PreferenceRecord {
            agents: self.agents,
            leaders: self.leaders,
            scores: RecordScores::Rows(
                self.scores
                    .chunks(self.agents.max(1))
                    .map(<[f64]>::to_vec)
                    .collect(),
            ),
        })?)
    }

    /// Parses a record whose scores are nested rows or a flat row-major
    /// list.
    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_json_with_leaders(s, None)
    }

    /// Parses a record, replacing its leader count when `leaders` is given.
    pub fn from_json_with_leaders(s: &str, leaders: Option<usize>) -> Result<Self> {
        let r: PreferenceRecord = serde_json::from_str(s)?;
        r.into_matrix(leaders)
    }
}

/// Precomputed strict rankings on both sides, as rank positions.
struct Ranks {
    leaders: usize,
    /// `leader_rank[l][f - L]`: position of follower f in l's list.
    leader_rank: Vec<Vec<usize>>,
    /// `follower_rank[f - L][l]`: position of leader l in f's list.
    follower_rank: Vec<Vec<usize>>,
}

impl Ranks {
    fn new(prefs: &PreferenceMatrix) -> Self {
        let l_count = prefs.leaders();
        let leader_rank = (0..l_count)
            .map(|l| {
                let mut rank = vec![0; prefs.followers()];
                for (pos, f) in prefs.leader_ranking(l).into_iter().enumerate() {
                    rank[f - l_count] = pos;
                }
                rank
            })
            .collect();
        let follower_rank = (l_count..prefs.agents())
            .map(|f| {
                let mut rank = vec![0; l_count];
                for (pos, l) in prefs.follower_ranking(f).into_iter().enumerate() {
                    rank[l] = pos;
                }
                rank
            })
            .collect();
        Self {
            leaders: l_count,
            leader_rank,
            follower_rank,
        }
    }

    fn follower_prefers(&self, f: usize, a: usize, b: usize) -> bool {
        let r = &self.follower_rank[f - self.leaders];
        r[a] < r[b]
    }

    fn leader_prefers(&self, l: usize, a: usize, b: usize) -> bool {
        let r = &self.leader_rank[l];
        r[a - self.leaders] < r[b - self.leaders]
    }
}

/// Team capacities per leader; sums to the follower count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityPlan {
    capacities: Vec<usize>,
}

impl CapacityPlan {
    pub fn new(capacities: Vec<usize>) -> Result<Self> {
        if capacities.is_empty() {
            return Err(Error::contract("capacity plan needs at least one leader"));
        }
        Ok(Self { capacities })
    }

    pub fn capacities(&self) -> &[usize] {
        &self.capacities
    }

    pub fn capacity(&self, leader: usize) -> usize {
        self.capacities[leader]
    }

    pub fn total(&self) -> usize {
        self.capacities.iter().sum()
    }

    pub fn leaders(&self) -> usize {
        self.capacities.len()
    }
}

/// Near-equal team sizes: the first `F mod L` leaders take `⌈F/L⌉`
/// followers, the rest `⌊F/L⌋`.
pub fn balance_capacities(leader_count: usize, follower_count: usize) -> Result<CapacityPlan> {
    if leader_count == 0 {
        return Err(Error::contract("leader count must be at least 1"));
    }
    let base = follower_count / leader_count;
    let extra = follower_count % leader_count;
    CapacityPlan::new(
        (0..leader_count)
            .map(|l| base + usize::from(l < extra))
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Team {
    pub leader: usize,
    pub followers: Vec<usize>,
}

/// Partition of followers among leaders. Teams are listed by leader and
/// followers are kept in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Grouping {
    pub teams: Vec<Team>,
}

impl Grouping {
    pub fn new(mut teams: Vec<Team>) -> Self {
        teams.sort_by_key(|t| t.leader);
        for t in &mut teams {
            t.followers.sort_unstable();
        }
        Self { teams }
    }

    /// One team holding every follower.
    pub fn single(leader: usize, followers: impl IntoIterator<Item = usize>) -> Self {
        Self::new(vec![Team {
            leader,
            followers: followers.into_iter().collect(),
        }])
    }

    fn from_assignment(leaders: usize, assignment: &[(usize, usize)]) -> Self {
        let mut teams: Vec<Team> = (0..leaders)
            .map(|l| Team {
                leader: l,
                followers: Vec::new(),
            })
            .collect();
        for &(f, l) in assignment {
            teams[l].followers.push(f);
        }
        Self::new(teams)
    }

    pub fn team(&self, leader: usize) -> Option<&Team> {
        self.teams.iter().find(|t| t.leader == leader)
    }

    pub fn leader_of(&self, follower: usize) -> Option<usize> {
        self.teams
            .iter()
            .find(|t| t.followers.contains(&follower))
            .map(|t| t.leader)
    }

    /// Position of the team containing `agent` (as leader or follower).
    pub fn team_index(&self, agent: usize) -> Option<usize> {
        self.teams
            .iter()
            .position(|t| t.leader == agent || t.followers.contains(&agent))
    }

    /// Every member of every team, leader first.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        self.teams
            .iter()
            .map(|t| {
                std::iter::once(t.leader)
                    .chain(t.followers.iter().copied())
                    .collect()
            })
            .collect()
    }

    pub fn members(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.groups().into_iter().flatten().collect();
        all.sort_unstable();
        all
    }

    /// Renames agents through `map` (survivor index → original index).
    pub fn remap(&self, map: &[usize]) -> Self {
        Self::new(
            self.teams
                .iter()
                .map(|t| Team {
                    leader: map[t.leader],
                    followers: t.followers.iter().map(|&f| map[f]).collect(),
                })
                .collect(),
        )
    }

    /// Checks the partition and capacity invariants against an instance.
    pub fn validate(&self, prefs: &PreferenceMatrix, plan: &CapacityPlan) -> Result<()> {
        let mut seen = vec![0usize; prefs.agents()];
        for t in &self.teams {
            if t.leader >= prefs.leaders() {
                return Err(Error::contract(format!(
                    "agent {} is not a leader",
                    t.leader
                )));
            }
            if t.followers.len() > plan.capacity(t.leader) {
                return Err(Error::contract(format!(
                    "team of leader {} exceeds capacity {}",
                    t.leader,
                    plan.capacity(t.leader)
                )));
            }
            for &f in &t.followers {
                if f < prefs.leaders() || f >= prefs.agents() {
                    return Err(Error::contract(format!("agent {f} is not a follower")));
                }
                seen[f] += 1;
            }
        }
        if let Some(f) = (prefs.leaders()..prefs.agents()).find(|&f| seen[f] != 1) {
            return Err(Error::contract(format!(
                "follower {f} appears in {} teams",
                seen[f]
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn check_instance(prefs: &PreferenceMatrix, plan: &CapacityPlan) -> Result<()> {
    if plan.leaders() != prefs.leaders() {
        return Err(Error::contract(format!(
            "capacity plan covers {} leaders, instance has {}",
            plan.leaders(),
            prefs.leaders()
        )));
    }
    if plan.total() != prefs.followers() {
        return Err(Error::contract(format!(
            "capacities sum to {}, instance has {} followers",
            plan.total(),
            prefs.followers()
        )));
    }
    Ok(())
}

/// Outcome of deferred acceptance with the number of proposals made.
#[derive(Debug, Clone, PartialEq)]
pub struct OomOutcome {
    pub grouping: Grouping,
    pub proposals: usize,
}

/// Order Oriented Matching: leader-proposing many-to-one deferred acceptance.
pub fn oom_match(prefs: &PreferenceMatrix, plan: &CapacityPlan) -> Result<Grouping> {
    oom_match_traced(prefs, plan).map(|o| o.grouping)
}

pub fn oom_match_traced(prefs: &PreferenceMatrix, plan: &CapacityPlan) -> Result<OomOutcome> {
    check_instance(prefs, plan)?;
    let l_count = prefs.leaders();
    let ranks = Ranks::new(prefs);
    let lists: Vec<Vec<usize>> = (0..l_count).map(|l| prefs.leader_ranking(l)).collect();
    let mut next = vec![0usize; l_count];
    let mut size = vec![0usize; l_count];
    // current leader of each follower
    let mut held: Vec<Option<usize>> = vec![None; prefs.agents()];
    let mut proposals = 0;

    loop {
        let Some(l) =
            (0..l_count).find(|&l| next[l] < lists[l].len() && size[l] < plan.capacity(l))
        else {
            break;
        };
        let f = lists[l][next[l]];
        next[l] += 1;
        proposals += 1;
        match held[f] {
            None => {
                held[f] = Some(l);
                size[l] += 1;
            }
            Some(current) => {
                if ranks.follower_prefers(f, l, current) {
                    held[f] = Some(l);
                    size[l] += 1;
                    size[current] -= 1;
                }
                // otherwise l is rejected and moves down its list next time
            }
        }
    }

    let assignment: Vec<(usize, usize)> = (l_count..prefs.agents())
        .map(|f| {
            held[f]
                .map(|l| (f, l))
                .ok_or_else(|| Error::contract(format!("follower {f} left unplaced")))
        })
        .collect::<Result<_>>()?;
    Ok(OomOutcome {
        grouping: Grouping::from_assignment(l_count, &assignment),
        proposals,
    })
}

/// Score Oriented Matching: greedy best-free-leader by mutual score.
pub fn som_match(prefs: &PreferenceMatrix, plan: &CapacityPlan) -> Result<Grouping> {
    check_instance(prefs, plan)?;
    let l_count = prefs.leaders();
    let mut size = vec![0usize; l_count];
    let mut assignment = Vec::with_capacity(prefs.followers());
    for f in l_count..prefs.agents() {
        let mut best: Option<(usize, f64)> = None;
        for l in 0..l_count {
            if size[l] < plan.capacity(l) {
                let mutual = prefs.mutual_score(f, l);
                if best.map_or(true, |(_, s)| mutual > s) {
                    best = Some((l, mutual));
                }
            }
        }
        if let Some((l, _)) = best {
            size[l] += 1;
            assignment.push((f, l));
        }
    }
    Ok(Grouping::from_assignment(l_count, &assignment))
}

/// Every `(leader, follower)` pair that would rather be together: the
/// follower strictly prefers the leader to its own, and the leader either
/// has a free slot or strictly prefers the follower to a current member.
pub fn find_blocking_pairs(
    grouping: &Grouping,
    prefs: &PreferenceMatrix,
    plan: &CapacityPlan,
) -> Vec<(usize, usize)> {
    let ranks = Ranks::new(prefs);
    let mut pairs = Vec::new();
    for l in 0..prefs.leaders() {
        let members: &[usize] = grouping.team(l).map_or(&[], |t| &t.followers);
        for f in prefs.leaders()..prefs.agents() {
            if members.contains(&f) {
                continue;
            }
            let follower_wants = match grouping.leader_of(f) {
                Some(current) => ranks.follower_prefers(f, l, current),
                None => true,
            };
            if !follower_wants {
                continue;
            }
            let leader_wants = members.len() < plan.capacity(l)
                || members.iter().any(|&m| ranks.leader_prefers(l, f, m));
            if leader_wants {
                pairs.push((l, f));
            }
        }
    }
    pairs
}

pub const ENUMERATION_MAX_LEADERS: usize = 3;
pub const ENUMERATION_MAX_FOLLOWERS: usize = 7;

/// Brute force over every capacity-respecting assignment, keeping those with
/// no blocking pair.
pub fn enumerate_stable_matchings(
    prefs: &PreferenceMatrix,
    plan: &CapacityPlan,
) -> Result<Vec<Grouping>> {
    check_instance(prefs, plan)?;
    let l_count = prefs.leaders();
    let f_count = prefs.followers();
    if l_count > ENUMERATION_MAX_LEADERS || f_count > ENUMERATION_MAX_FOLLOWERS {
        return Err(Error::SizeLimit(format!(
            "{l_count} leaders / {f_count} followers (limit {ENUMERATION_MAX_LEADERS} / {ENUMERATION_MAX_FOLLOWERS})"
        )));
    }
    let mut stable = Vec::new();
    let total = l_count.pow(f_count as u32);
    let mut choice = vec![0usize; f_count];
    for code in 0..total {
        let mut c = code;
        for slot in choice.iter_mut() {
            *slot = c % l_count;
            c /= l_count;
        }
        let mut size = vec![0usize; l_count];
        for &l in &choice {
            size[l] += 1;
        }
        if (0..l_count).any(|l| size[l] > plan.capacity(l)) {
            continue;
        }
        let assignment: Vec<(usize, usize)> = choice
            .iter()
            .enumerate()
            .map(|(i, &l)| (l_count + i, l))
            .collect();
        let grouping = Grouping::from_assignment(l_count, &assignment);
        if find_blocking_pairs(&grouping, prefs, plan).is_empty() {
            stable.push(grouping);
        }
    }
    Ok(stable)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchAlgorithm {
    Oom,
    Som,
}

impl MatchAlgorithm {
    pub fn run(self, prefs: &PreferenceMatrix, plan: &CapacityPlan) -> Result<Grouping> {
        match self {
            MatchAlgorithm::Oom => oom_match(prefs, plan),
            MatchAlgorithm::Som => som_match(prefs, plan),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MatchAlgorithm::Oom => "oom",
            MatchAlgorithm::Som => "som",
        }
    }
}

impl fmt::Display for MatchAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchAlgorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oom" => Ok(MatchAlgorithm::Oom),
            "som" => Ok(MatchAlgorithm::Som),
            other => Err(Error::Parse(format!(
                "unknown matching algorithm `{other}`"
            ))),
        }
    }
}

/// Balances capacities over the given preference instance and matches.
pub fn form_teams(prefs: &PreferenceMatrix, algorithm: MatchAlgorithm) -> Result<Grouping> {
    let plan = balance_capacities(prefs.leaders(), prefs.followers())?;
    algorithm.run(prefs, &plan)
}
