use std::collections::BTreeMap;

/// TF-IDF model fitted on one small collection: raw term counts and
/// `idf = ln((1 + P) / (1 + df)) + 1`.
#[derive(Debug, Clone)]
pub struct TfIdf {
    idf: BTreeMap<String, f64>,
    unseen_idf: f64,
    docs: Vec<(BTreeMap<String, f64>, f64)>,
}

fn counts<S: AsRef<str>>(tokens: &[S]) -> BTreeMap<String, f64> {
    let mut tf = BTreeMap::new();
    for t in tokens {
        *tf.entry(t.as_ref().to_string()).or_insert(0.0) += 1.0;
    }
    tf
}

impl TfIdf {
    pub fn fit<D: AsRef<[S]>, S: AsRef<str>>(collection: &[D]) -> Self {
        let p = collection.len() as f64;
        let mut df: BTreeMap<String, f64> = BTreeMap::new();
        let tfs: Vec<BTreeMap<String, f64>> = collection.iter().map(|d| counts(d.as_ref())).collect();
        for tf in &tfs {
            for term in tf.keys() {
                *df.entry(term.clone()).or_insert(0.0) += 1.0;
            }
        }
        let idf: BTreeMap<String, f64> = df
            .into_iter()
            .map(|(t, d)| (t, ((1.0 + p) / (1.0 + d)).ln() + 1.0))
            .collect();
        let unseen_idf = (1.0 + p).ln() + 1.0;
        let docs = tfs
            .into_iter()
            .map(|tf| {
                let weighted: BTreeMap<String, f64> =
                    tf.into_iter().map(|(t, c)| { let w = c * idf[&t]; (t, w) }).collect();
                let norm = weighted.values().map(|w| w * w).sum::<f64>().sqrt();
                (weighted, norm)
            })
            .collect();
        TfIdf {
            idf,
            unseen_idf,
            docs,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// `1 - cosine` between the query and every fitted document; a zero
    /// vector on either side gives distance 1.
    pub fn cosine_distances<S: AsRef<str>>(&self, query: &[S]) -> Vec<f64> {
        let q: BTreeMap<String, f64> = counts(query)
            .into_iter()
            .map(|(t, c)| {
                let w = c * self.idf.get(&t).copied().unwrap_or(self.unseen_idf);
                (t, w)
            })
            .collect();
        let q_norm = q.values().map(|w| w * w).sum::<f64>().sqrt();
        self.docs
            .iter()
            .map(|(doc, norm)| {
                if q_norm == 0.0 || *norm == 0.0 {
                    return 1.0;
                }
                let dot: f64 = q
                    .iter()
                    .filter_map(|(t, w)| doc.get(t).map(|d| w * d))
                    .sum();
                1.0 - dot / (q_norm * norm)
            })
            .collect()
    }

    /// Indices of the `k` nearest documents, nearest first; ties keep
    /// collection order.
    pub fn nearest<S: AsRef<str>>(&self, query: &[S], k: usize) -> Vec<usize> {
        let dist = self.cosine_distances(query);
        let mut order: Vec<usize> = (0..dist.len()).collect();
        order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        order.truncate(k);
        order
    }
}
