use super::oim::{l2_normalize, l2_normalize_backward};

#[derive(Clone, Debug)]
pub struct TripletOutput {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    /// Anchors that had both a positive and a negative in the batch.
    pub anchors: usize,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss on L2-normalised embeddings.
///
/// For every labeled anchor with at least one positive and one negative:
/// `max(0, max_pos d - min_neg d + margin)`, averaged over such anchors.
/// Unlabeled samples (`None`) never act as anchor, positive or negative.
pub fn triplet_loss(embeddings: &[Vec<f64>], labels: &[Option<usize>], margin: f64) -> TripletOutput {
    let n = embeddings.len();
    let normed: Vec<(Vec<f64>, f64)> = embeddings.iter().map(|x| l2_normalize(x)).collect();
    let dim = embeddings.first().map_or(0, |e| e.len());
    let mut dunit = vec![vec![0.0; dim]; n];
    let mut terms = Vec::new();
    for a in 0..n {
        let Some(la) = labels[a] else { continue };
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            let Some(lj) = labels[j] else { continue };
            if j == a {
                continue;
            }
            let d = distance(&normed[a].0, &normed[j].0);
            if lj == la {
                if hardest_pos.is_none_or(|(_, b)| d > b) {
                    hardest_pos = Some((j, d));
                }
            } else if hardest_neg.is_none_or(|(_, b)| d < b) {
                hardest_neg = Some((j, d));
            }
        }
        if let (Some(p), Some(ng)) = (hardest_pos, hardest_neg) {
            terms.push((a, p, ng));
        }
    }
    let anchors = terms.len();
    if anchors == 0 {
        return TripletOutput {
            loss: 0.0,
            grads: vec![vec![0.0; dim]; n],
            anchors,
        };
    }
    let scale = 1.0 / anchors as f64;
    let mut loss = 0.0;
    for (a, (p, dp), (ng, dn)) in terms {
        let hinge = dp - dn + margin;
        if hinge <= 0.0 {
            continue;
        }
        loss += hinge * scale;
        // d ||u - v|| / du = (u - v) / ||u - v||; zero-distance pairs contribute no direction
        let mut add = |i: usize, j: usize, d: f64, sign: f64| {
            if d <= 1e-12 {
                return;
            }
            for k in 0..dim {
                let g = sign * scale * (normed[i].0[k] - normed[j].0[k]) / d;
                dunit[i][k] += g;
                dunit[j][k] -= g;
            }
        };
        add(a, p, dp, 1.0);
        add(a, ng, dn, -1.0);
    }
    let grads = normed
        .iter()
        .zip(&dunit)
        .map(|((u, norm), g)| l2_normalize_backward(u, *norm, g))
        .collect();
    TripletOutput { loss, grads, anchors }
}
