use serde::{Deserialize, Serialize};

/// Largest group the joint decoder is asked to serve.
pub const MAX_CLUSTER_SIZE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    /// User indices in ascending order.
    pub members: Vec<usize>,
    pub centroid: (f64, f64),
}

impl Cluster {
    fn new(members: Vec<usize>, positions: &[(f64, f64)]) -> Self {
        let n = members.len() as f64;
        let (sx, sy) = members
            .iter()
            .fold((0.0, 0.0), |(x, y), &i| (x + positions[i].0, y + positions[i].1));
        Self {
            members,
            centroid: (sx / n, sy / n),
        }
    }
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Largest pairwise distance between members of `a` and `b`.
fn linkage(a: &[usize], b: &[usize], positions: &[(f64, f64)]) -> f64 {
    a.iter()
        .flat_map(|&i| b.iter().map(move |&j| distance(positions[i], positions[j])))
        .fold(0.0, f64::max)
}

/// Greedy agglomerative grouping of nearby users.
///
/// Starting from singletons, repeatedly merges the pair of groups with the
/// smallest complete-linkage distance, as long as the merged group stays within
/// [`MAX_CLUSTER_SIZE`] and every pairwise distance stays within `threshold`.
/// Ties go to the pair with the lowest member indices. Output is sorted by
/// first member.
pub fn cluster_users(positions: &[(f64, f64)], threshold: f64) -> Vec<Cluster> {
    let mut groups: Vec<Vec<usize>> = (0..positions.len()).map(|i| vec![i]).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                if groups[a].len() + groups[b].len() > MAX_CLUSTER_SIZE {
                    continue;
                }
                let d = linkage(&groups[a], &groups[b], positions);
                if d <= threshold && best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let Some((_, a, b)) = best else { break };
        let merged = groups.remove(b);
        groups[a].extend(merged);
        groups[a].sort_unstable();
    }
    groups.sort_by_key(|g| g[0]);
    groups.into_iter().map(|g| Cluster::new(g, positions)).collect()
}
