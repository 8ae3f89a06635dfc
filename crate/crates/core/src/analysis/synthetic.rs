//! Planted-structure interaction logs for desk-scale experiments.
//!
//! Items are split into contiguous interest clusters. Every cluster carries a
//! fixed successor ring, so consecutive picks from one cluster tend to follow
//! it. Timestamps come from a per-user rhythm profile and explanations are
//! tags of the current, next or previous item depending on the user's
//! alignment profile.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::dataset::Interaction;

/// Gap distribution of one user group: log-normal with the given mean, where
/// `burstiness` is the log-scale standard deviation (0 gives constant gaps).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhythmProfile {
    pub mean_gap: f64,
    pub burstiness: f64,
}

pub const HOUR: f64 = 3600.0;
pub const DAY: f64 = 86_400.0;

impl RhythmProfile {
    /// One-hour and thirty-day groups.
    pub fn bimodal() -> Vec<RhythmProfile> {
        vec![
            RhythmProfile {
                mean_gap: HOUR,
                burstiness: 0.5,
            },
            RhythmProfile {
                mean_gap: 30.0 * DAY,
                burstiness: 0.5,
            },
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentProfile {
    /// Explanation tags the item it accompanies.
    Balanced,
    /// Explanation tags the user's next item.
    RecDominant,
    /// Explanation tags the user's previous item.
    ExpDominant,
}

impl AlignmentProfile {
    pub const ALL: [AlignmentProfile; 3] = [
        AlignmentProfile::Balanced,
        AlignmentProfile::RecDominant,
        AlignmentProfile::ExpDominant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlignmentProfile::Balanced => "balanced",
            AlignmentProfile::RecDominant => "rec_dominant",
            AlignmentProfile::ExpDominant => "exp_dominant",
        }
    }

    pub fn index(self) -> usize {
        match self {
            AlignmentProfile::Balanced => 0,
            AlignmentProfile::RecDominant => 1,
            AlignmentProfile::ExpDominant => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub user_count: usize,
    pub item_count: usize,
    pub expl_count: usize,
    pub cluster_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// User `u` gets `rhythms[(u / alignments.len()) % rhythms.len()]`.
    pub rhythms: Vec<RhythmProfile>,
    /// User `u` gets `alignments[u % alignments.len()]`.
    pub alignments: Vec<AlignmentProfile>,
    /// Chance that the next pick from a cluster is the successor of the
    /// previous pick from that cluster.
    pub follow_prob: f64,
    /// Chance that an explanation is replaced by a uniform draw.
    pub expl_noise: f64,
    /// When set, a gap longer than this many seconds breaks the successor
    /// chain, so long-gap users lose most of their sequential structure.
    pub session_gap: Option<f64>,
    /// When set, each rhythm group draws its interests from its own share of
    /// the clusters (group `g` of `R` uses clusters `c` with `c % R == g`).
    pub rhythm_clusters: bool,
    /// When set, a two-interest user's cluster is decided by the gap between
    /// the two previous interactions: longer than the user's mean gap switches
    /// to the other cluster, otherwise the user stays.
    pub gap_switching: bool,
    /// When set, each alignment profile tags items with explanations from its
    /// own slice of the explanation vocabulary.
    pub profile_expl_slices: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            user_count: 500,
            item_count: 300,
            expl_count: 200,
            cluster_count: 3,
            min_len: 15,
            max_len: 30,
            rhythms: RhythmProfile::bimodal(),
            alignments: AlignmentProfile::ALL.to_vec(),
            follow_prob: 0.8,
            expl_noise: 0.1,
            session_gap: None,
            rhythm_clusters: false,
            gap_switching: false,
            profile_expl_slices: false,
            seed: 7,
        }
    }
}

/// Planted truth for one user.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub clusters: Vec<usize>,
    /// Mixture weight of each entry of `clusters`.
    pub weights: Vec<f64>,
    pub rhythm_group: usize,
    pub mean_gap: f64,
    pub alignment: AlignmentProfile,
    /// Cluster of every emitted interaction, in order.
    pub draws: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub interactions: Vec<Interaction>,
    pub users: Vec<UserTruth>,
}

pub fn item_id(item: usize) -> String {
    format!("i{item}")
}

pub fn expl_id(expl: usize) -> String {
    format!("x{expl}")
}

impl SyntheticSpec {
    pub fn cluster_of(&self, item: usize) -> usize {
        item * self.cluster_count / self.item_count
    }

    fn cluster_items(&self, c: usize) -> std::ops::Range<usize> {
        let start = (c * self.item_count).div_ceil(self.cluster_count);
        let end = ((c + 1) * self.item_count).div_ceil(self.cluster_count);
        start..end
    }

    fn validate(&self) -> Result<(), AnalysisError> {
        let bad = |msg: &str| Err(AnalysisError::Infeasible(msg.to_string()));
        if self.user_count == 0 || self.cluster_count == 0 {
            return bad("user and cluster counts must be positive");
        }
        if self.item_count < self.cluster_count || self.expl_count < self.cluster_count {
            return bad("item and explanation counts must be at least the cluster count");
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return bad("sequence lengths need 3 <= min_len <= max_len");
        }
        if self.rhythms.is_empty() || self.alignments.is_empty() {
            return bad("at least one rhythm and one alignment profile are needed");
        }
        if self.profile_expl_slices && self.expl_count < self.alignments.len() {
            return bad("explanation slices need at least one explanation per alignment profile");
        }
        if self.rhythm_clusters && self.cluster_count < self.rhythms.len() {
            return bad("rhythm-linked clusters need at least one cluster per rhythm group");
        }
        if self.rhythms.iter().any(|r| !(r.mean_gap >= 1.0 && r.burstiness >= 0.0 && r.burstiness.is_finite())) {
            return bad("rhythm mean gaps must be >= 1 s with finite non-negative burstiness");
        }
        if !(0.0..=1.0).contains(&self.follow_prob) || !(0.0..=1.0).contains(&self.expl_noise) {
            return bad("probabilities must lie in [0, 1]");
        }
        Ok(())
    }
}

struct Walker<'a> {
    spec: &'a SyntheticSpec,
    /// Successor of each item inside its cluster ring.
    next: &'a [usize],
    last: Vec<Option<usize>>,
}

impl Walker<'_> {
    fn pick(&mut self, rng: &mut ChaCha8Rng, cluster: usize, follow: bool) -> usize {
        let item = match self.last[cluster] {
            Some(prev) if follow && rng.random::<f64>() < self.spec.follow_prob => self.next[prev],
            _ => rng.random_range(self.spec.cluster_items(cluster)),
        };
        self.last[cluster] = Some(item);
        item
    }
}

/// Generates a corpus and its planted labels. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus, AnalysisError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut next = vec![0; spec.item_count];
    for c in 0..spec.cluster_count {
        let mut ring: Vec<usize> = spec.cluster_items(c).collect();
        ring.shuffle(&mut rng);
        for (k, &item) in ring.iter().enumerate() {
            next[item] = ring[(k + 1) % ring.len()];
        }
    }
    let slices = if spec.profile_expl_slices { spec.alignments.len() } else { 1 };
    let slice = |a: usize| (a * spec.expl_count / slices)..((a + 1) * spec.expl_count / slices);
    // tags[s][item]: explanation of `item` within slice `s`
    let tags: Vec<Vec<usize>> = (0..slices)
        .map(|a| (0..spec.item_count).map(|_| rng.random_range(slice(a))).collect())
        .collect();

    let mut interactions = Vec::new();
    let mut users = Vec::with_capacity(spec.user_count);
    let groups = spec.rhythms.len();
    for u in 0..spec.user_count {
        let alignment = spec.alignments[u % spec.alignments.len()];
        let own = if spec.profile_expl_slices { u % spec.alignments.len() } else { 0 };
        let rhythm_group = (u / spec.alignments.len()) % groups;
        let rhythm = spec.rhythms[rhythm_group];

        let pool: Vec<usize> = if spec.rhythm_clusters {
            (0..spec.cluster_count).filter(|c| c % groups == rhythm_group).collect()
        } else {
            (0..spec.cluster_count).collect()
        };
        let two = pool.len() >= 2 && rng.random::<f64>() < 0.5;
        let clusters: Vec<usize> = pool.choose_multiple(&mut rng, if two { 2 } else { 1 }).copied().collect();
        let weights = if two {
            let w: f64 = rng.random_range(0.55..0.85);
            vec![w, 1.0 - w]
        } else {
            vec![1.0]
        };

        let n = rng.random_range(spec.min_len..=spec.max_len);
        let gap_dist = LogNormal::new(-rhythm.burstiness * rhythm.burstiness / 2.0, rhythm.burstiness)
            .map_err(|e| AnalysisError::Infeasible(e.to_string()))?;
        let mut times = Vec::with_capacity(n);
        let mut t = 1_600_000_000 + rng.random_range(0..365 * 86_400_i64);
        for i in 0..n {
            if i > 0 {
                t += (rhythm.mean_gap * gap_dist.sample(&mut rng)).round().max(1.0) as i64;
            }
            times.push(t);
        }

        // positions -1..=n, the ends only feed lagging or leading explanations
        let mut walker = Walker {
            spec,
            next: &next,
            last: vec![None; spec.cluster_count],
        };
        let mut draws = Vec::with_capacity(n + 2);
        let mut items = Vec::with_capacity(n + 2);
        for pos in 0..n + 2 {
            let r: f64 = rng.random();
            let mixed = if two && r >= weights[0] { 1 } else { 0 };
            // interaction p - 1 follows the gap between interactions p - 3 and p - 2
            let k = match draws.last() {
                Some(&prev) if spec.gap_switching && two && (3..=n + 1).contains(&pos) => {
                    let stay = ((times[pos - 2] - times[pos - 3]) as f64) <= rhythm.mean_gap;
                    let prev_k = usize::from(clusters[1] == prev);
                    if stay {
                        prev_k
                    } else {
                        1 - prev_k
                    }
                }
                _ => mixed,
            };
            let cluster = clusters[k];
            let follow = match (spec.session_gap, pos) {
                (Some(limit), p) if p >= 2 && p <= n => ((times[p - 1] - times[p - 2]) as f64) <= limit,
                _ => true,
            };
            draws.push(cluster);
            items.push(walker.pick(&mut rng, cluster, follow));
        }

        let user_id = format!("u{u}");
        for i in 0..n {
            let item = items[i + 1];
            let tagged = match alignment {
                AlignmentProfile::Balanced => item,
                AlignmentProfile::RecDominant => items[i + 2],
                AlignmentProfile::ExpDominant => items[i],
            };
            let expl = if rng.random::<f64>() < spec.expl_noise {
                rng.random_range(slice(own))
            } else {
                tags[own][tagged]
            };
            interactions.push(Interaction {
                user_id: user_id.clone(),
                item_id: item_id(item),
                expl_id: expl_id(expl),
                timestamp: times[i],
            });
        }
        users.push(UserTruth {
            user_id,
            clusters,
            weights,
            rhythm_group,
            mean_gap: rhythm.mean_gap,
            alignment,
            draws: draws[1..=n].to_vec(),
        });
    }
    Ok(SyntheticCorpus { interactions, users })
}

/// Writes `user_id,alignment,rhythm_group,mean_gap,clusters,weights`.
pub fn write_labels(path: impl AsRef<Path>, users: &[UserTruth]) -> Result<(), AnalysisError> {
    let mut out = String::from("user_id,alignment,rhythm_group,mean_gap,clusters,weights\n");
    for u in users {
        let join = |v: Vec<String>| v.join(";");
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            u.user_id,
            u.alignment.name(),
            u.rhythm_group,
            u.mean_gap,
            join(u.clusters.iter().map(ToString::to_string).collect()),
            join(u.weights.iter().map(|w| format!("{w:.6}")).collect()),
        ));
    }
    super::write_file(path.as_ref(), &out)
}
