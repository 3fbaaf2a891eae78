use rand::Rng;

use crate::cloud::NeighborWindows;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityReport {
    pub sources: Vec<usize>,
    /// Layers needed for each source's feature to reach every point;
    /// `None` when some point is unreachable.
    pub hops: Vec<Option<usize>>,
}

impl ConnectivityReport {
    fn reached(&self) -> impl Iterator<Item = usize> + '_ {
        self.hops.iter().flatten().copied()
    }

    pub fn min(&self) -> Option<usize> {
        self.reached().min()
    }

    pub fn max(&self) -> Option<usize> {
        self.reached().max()
    }

    pub fn mean(&self) -> Option<f64> {
        let v: Vec<usize> = self.reached().collect();
        (!v.is_empty()).then(|| v.iter().sum::<usize>() as f64 / v.len() as f64)
    }

    pub fn unreachable(&self) -> usize {
        self.hops.iter().filter(|h| h.is_none()).count()
    }

    /// `sample,point,hops` rows (empty hops when unreachable) and a final
    /// aggregate line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,point,hops\n");
        for (k, (&p, h)) in self.sources.iter().zip(&self.hops).enumerate() {
            s.push_str(&format!("{k},{p},{}\n", h.map_or(String::new(), |h| h.to_string())));
        }
        let f = |x: Option<String>| x.unwrap_or_default();
        s.push_str(&format!(
            "# samples={} min={} mean={} max={} unreachable={}\n",
            self.hops.len(),
            f(self.min().map(|v| v.to_string())),
            f(self.mean().map(|v| format!("{v:.4}"))),
            f(self.max().map(|v| v.to_string())),
            self.unreachable()
        ));
        s
    }
}

/// Edge `j → i` for every `j` in `i`'s window, in compressed row form.
fn out_edges(windows: &NeighborWindows) -> (Vec<usize>, Vec<usize>) {
    let n = windows.len();
    let mut deg = vec![0usize; n + 1];
    for w in windows.iter() {
        for &j in w {
            deg[j + 1] += 1;
        }
    }
    for i in 0..n {
        deg[i + 1] += deg[i];
    }
    let mut fill = deg.clone();
    let mut adj = vec![0usize; deg[n]];
    for (i, w) in windows.iter().enumerate() {
        for &j in w {
            adj[fill[j]] = i;
            fill[j] += 1;
        }
    }
    (deg, adj)
}

/// Breadth-first hop counts from each source over the window graph.
pub fn hop_counts(windows: &NeighborWindows, sources: &[usize]) -> Result<Vec<Option<usize>>> {
    let n = windows.len();
    if let Some(&s) = sources.iter().find(|&&s| s >= n) {
        return Err(Error::IndexOutOfRange { index: s, len: n });
    }
    let (off, adj) = out_edges(windows);
    let mut depth = vec![usize::MAX; n];
    Ok(sources
        .iter()
        .map(|&s| {
            depth.fill(usize::MAX);
            depth[s] = 0;
            let mut frontier = vec![s];
            let (mut seen, mut hops) = (1usize, 0usize);
            while !frontier.is_empty() && seen < n {
                hops += 1;
                let mut next = Vec::new();
                for &u in &frontier {
                    for &v in &adj[off[u]..off[u + 1]] {
                        if depth[v] == usize::MAX {
                            depth[v] = hops;
                            next.push(v);
                        }
                    }
                }
                seen += next.len();
                frontier = next;
            }
            (seen == n).then_some(hops)
        })
        .collect())
}

/// Hop counts from `samples` distinct random points (all points when
/// fewer), in sampled order.
pub fn connectivity<R: Rng + ?Sized>(windows: &NeighborWindows, samples: usize, rng: &mut R) -> Result<ConnectivityReport> {
    let n = windows.len();
    if n < 2 {
        return Err(Error::invalid("connectivity needs at least two points"));
    }
    let sources = rand::seq::index::sample(rng, n, samples.min(n)).into_vec();
    let hops = hop_counts(windows, &sources)?;
    Ok(ConnectivityReport { sources, hops })
}
