//! Softmax regression on raw centred coordinates, as a difficulty probe for
//! the synthetic task.

use tsegcn::dataio::{synth_sequences, to_batch, SkeletonSequence, SynthSpec};

const CLASSES: usize = 4;

fn features(seqs: &[SkeletonSequence]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let x = seqs
        .iter()
        .map(|s| to_batch(std::slice::from_ref(s), 16).unwrap().into_data())
        .collect();
    (x, seqs.iter().map(|s| s.label.unwrap()).collect())
}

struct Linear {
    w: Vec<[f64; CLASSES]>,
    b: [f64; CLASSES],
}

impl Linear {
    fn logits(&self, x: &[f64]) -> [f64; CLASSES] {
        let mut z = self.b;
        for (xi, wi) in x.iter().zip(&self.w) {
            for c in 0..CLASSES {
                z[c] += xi * wi[c];
            }
        }
        z
    }

    fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..CLASSES).fold(0, |best, c| if z[c] > z[best] { c } else { best })
    }

    fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> f64 {
        x.iter().zip(y).filter(|(xi, &yi)| self.predict(xi) == yi).count() as f64 / y.len() as f64
    }
}

/// Full-batch gradient descent on mean cross-entropy.
fn fit(x: &[Vec<f64>], y: &[usize], steps: usize, lr: f64) -> Linear {
    let d = x[0].len();
    let mut m = Linear {
        w: vec![[0.0; CLASSES]; d],
        b: [0.0; CLASSES],
    };
    let n = x.len() as f64;
    for _ in 0..steps {
        let mut gw = vec![[0.0; CLASSES]; d];
        let mut gb = [0.0; CLASSES];
        for (xi, &yi) in x.iter().zip(y) {
            let z = m.logits(xi);
            let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..CLASSES {
                let g = (e[c] / s - if c == yi { 1.0 } else { 0.0 }) / n;
                gb[c] += g;
                for (gwj, xj) in gw.iter_mut().zip(xi) {
                    gwj[c] += g * xj;
                }
            }
        }
        for (wj, gj) in m.w.iter_mut().zip(&gw) {
            for c in 0..CLASSES {
                wj[c] -= lr * gj[c];
            }
        }
        for c in 0..CLASSES {
            m.b[c] -= lr * gb[c];
        }
    }
    m
}

#[test]
fn linear_probe_generalizes_poorly() {
    let mut held_out = Vec::new();
    for seed in 0..3 {
        let spec = SynthSpec {
            samples_per_class: 16,
            seed,
            ..SynthSpec::default()
        };
        let (xtr, ytr) = features(&synth_sequences(&spec, 0).unwrap());
        let (xte, yte) = features(
            &synth_sequences(
                &SynthSpec {
                    samples_per_class: 64,
                    ..spec
                },
                1,
            )
            .unwrap(),
        );
        let m = fit(&xtr, &ytr, 2000, 0.5);
        let (tr, te) = (m.accuracy(&xtr, &ytr), m.accuracy(&xte, &yte));
        println!("seed {seed}: linear train {tr:.3} held-out {te:.3}");
        held_out.push(te);
    }
    let mean = held_out.iter().sum::<f64>() / held_out.len() as f64;
    println!("mean held-out {mean:.3}");
    assert!(mean < 0.85, "{mean}");
}
