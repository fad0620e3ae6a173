//! Separability of the default synthetic dataset, measured with a plain
//! softmax-regression probe on mean-pooled features. The probe shares no
//! code with the model.

use vila_core::data::{synthetic_dataset, SynthConfig};

// First verified run: 36/36 test bags.
const PROBE_GOLDEN: f64 = 1.0;

fn mean_pool(x: &vila_core::Tensor) -> Vec<f64> {
    let mut m = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (a, b) in m.iter_mut().zip(x.row(r)) {
            *a += b / x.rows() as f64;
        }
    }
    m
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn linear_probe_on_dual_scale_means() {
    let cfg = SynthConfig::default();
    let ds = synthetic_dataset(&cfg).unwrap();
    let c = cfg.n_classes;
    // per class: first 40% of its bags train, the last 30% test
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..c {
        let members: Vec<_> = ds.bags.iter().filter(|b| b.label == class).collect();
        let n = members.len();
        let n_train = n * 4 / 10;
        let n_test = n * 3 / 10;
        for (i, b) in members.into_iter().enumerate() {
            let mut f = mean_pool(&b.low);
            f.extend(mean_pool(&b.high));
            f.push(1.0);
            if i < n_train {
                train.push((f, b.label));
            } else if i >= n - n_test {
                test.push((f, b.label));
            }
        }
    }
    let dim = train[0].0.len();
    let mut w = vec![vec![0.0; dim]; c];
    for _ in 0..2000 {
        let mut g = vec![vec![0.0; dim]; c];
        for (x, y) in &train {
            let z: Vec<f64> = w.iter().map(|wk| wk.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let p = softmax(&z);
            for k in 0..c {
                let err = p[k] - if k == *y { 1.0 } else { 0.0 };
                for j in 0..dim {
                    g[k][j] += err * x[j] / train.len() as f64;
                }
            }
        }
        for k in 0..c {
            for j in 0..dim {
                w[k][j] -= 0.5 * (g[k][j] + 1e-3 * w[k][j]);
            }
        }
    }
    let correct = test
        .iter()
        .filter(|(x, y)| {
            let z: Vec<f64> = w.iter().map(|wk| wk.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let best = (0..c).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            best == *y
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    println!("linear probe accuracy {acc:.4} ({correct}/{})", test.len());
    assert!(acc >= 0.85, "probe accuracy {acc}");
    assert!((acc - PROBE_GOLDEN).abs() <= 0.05, "probe accuracy {acc} vs frozen {PROBE_GOLDEN}");
}
