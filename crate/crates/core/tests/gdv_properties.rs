use hcl_core::gdv::{self, GdvOptions, LabeledRepresentation};
use hcl_core::hcl::Backbone;
use hcl_core::nn::{self, Activation, LayerSpec, NetworkSpec};
use hcl_core::{RngStream, StreamId, Tensor};
use proptest::prelude::*;

/// Straight double loop over the definition, no shared code with the library.
fn oracle(points: &[Vec<f64>], labels: &[usize], c: usize, normalize: bool) -> f64 {
    let n = points.len();
    let d = points[0].len();
    let mut p = points.to_vec();
    if normalize {
        for j in 0..d {
            let mean: f64 = p.iter().map(|r| r[j]).sum::<f64>() / n as f64;
            let var: f64 = p.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum::<f64>() / n as f64;
            for r in p.iter_mut() {
                r[j] = if var > 0.0 { (r[j] - mean) * 0.5 / var.sqrt() } else { 0.0 };
            }
        }
    }
    let dist = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut intra = 0.0;
    for k in 0..c {
        let (mut s, mut cnt) = (0.0, 0usize);
        for i in 0..n {
            for j in 0..n {
                if i < j && labels[i] == k && labels[j] == k {
                    s += dist(&p[i], &p[j]);
                    cnt += 1;
                }
            }
        }
        if cnt > 0 {
            intra += s / cnt as f64;
        }
    }
    let mut inter = 0.0;
    for a in 0..c {
        for b in a + 1..c {
            let (mut s, mut cnt) = (0.0, 0usize);
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == a && labels[j] == b {
                        s += dist(&p[i], &p[j]);
                        cnt += 1;
                    }
                }
            }
            inter += s / cnt as f64;
        }
    }
    (intra / c as f64 - 2.0 * inter / (c * (c - 1)) as f64) / (d as f64).sqrt()
}

fn gaussian_cloud(n: usize, d: usize, c: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = RngStream::new(seed, StreamId::Subsample);
    let points = (0..n).map(|_| (0..d).map(|_| rng.normal()).collect()).collect();
    // First c labels cover every class; the rest are uniform.
    let labels = (0..n).map(|i| if i < c { i } else { rng.below(c as u64) as usize }).collect();
    (points, labels)
}

fn rep(points: &[Vec<f64>], labels: &[usize], c: usize) -> LabeledRepresentation {
    let d = points[0].len();
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    LabeledRepresentation::new(Tensor::new(&[points.len(), d], flat).unwrap(), labels.to_vec(), c).unwrap()
}

#[test]
fn shuffled_labels_score_near_zero() {
    for seed in 0..20 {
        let (p, l) = gaussian_cloud(1000, 10, 10, seed);
        let v = gdv::gdv(&rep(&p, &l, 10), true).unwrap();
        assert!(v.abs() <= 0.05, "seed {seed}: {v}");
    }
}

#[test]
fn separated_clusters_approach_minus_one() {
    let mut rng = RngStream::new(1, StreamId::Subsample);
    let mut p = Vec::new();
    let mut l = Vec::new();
    for i in 0..200 {
        let c = i % 2;
        p.push(vec![if c == 0 { -1.0 } else { 1.0 } + 1e-3 * rng.normal()]);
        l.push(c);
    }
    let v = gdv::gdv(&rep(&p, &l, 2), true).unwrap();
    assert!((v + 1.0).abs() < 0.01, "{v}");
}

#[test]
fn separability_direction() {
    let within = [-0.3, 0.0, 0.4];
    let mut last = f64::INFINITY;
    for gap in [0.5, 1.0, 2.0, 4.0, 8.0] {
        let mut p = Vec::new();
        let mut l = Vec::new();
        for &w in &within {
            p.push(vec![w]);
            l.push(0);
            p.push(vec![gap + w]);
            l.push(1);
        }
        let v = gdv::gdv(&rep(&p, &l, 2), false).unwrap();
        assert!(v < last, "gap {gap}: {v} !< {last}");
        last = v;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matches_brute_force(n in 4usize..=30, d in 1usize..6, c in 2usize..5, seed in 0u64..1000, normalize: bool) {
        let c = c.min(n);
        let (p, l) = gaussian_cloud(n, d, c, seed);
        let got = gdv::gdv(&rep(&p, &l, c), normalize).unwrap();
        let want = oracle(&p, &l, c, normalize);
        prop_assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }

    #[test]
    fn row_permutation_and_relabel_are_exact(n in 6usize..60, d in 1usize..8, c in 2usize..6, seed in 0u64..1000) {
        let c = c.min(n);
        let (p, l) = gaussian_cloud(n, d, c, seed);
        let base = gdv::gdv(&rep(&p, &l, c), true).unwrap();

        let mut rng = RngStream::new(seed, StreamId::Shuffle);
        let perm = rng.permutation(n);
        let p2: Vec<_> = perm.iter().map(|&i| p[i].clone()).collect();
        let l2: Vec<_> = perm.iter().map(|&i| l[i]).collect();
        prop_assert_eq!(gdv::gdv(&rep(&p2, &l2, c), true).unwrap().to_bits(), base.to_bits());

        let names = rng.permutation(c);
        let l3: Vec<_> = l.iter().map(|&k| names[k]).collect();
        prop_assert_eq!(gdv::gdv(&rep(&p, &l3, c), true).unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn affine_invariance_when_normalized(seed in 0u64..1000, d in 1usize..6) {
        let (p, l) = gaussian_cloud(40, d, 3, seed);
        let mut rng = RngStream::new(seed, StreamId::Augment);
        let coef: Vec<(f64, f64)> = (0..d)
            .map(|_| {
                let a = (0.1 + 5.0 * rng.uniform()) * if rng.bernoulli(0.5) { -1.0 } else { 1.0 };
                (a, 10.0 * rng.normal())
            })
            .collect();
        let q: Vec<Vec<f64>> = p.iter().map(|r| r.iter().zip(&coef).map(|(x, (a, b))| a * x + b).collect()).collect();
        let x = gdv::gdv(&rep(&p, &l, 3), true).unwrap();
        let y = gdv::gdv(&rep(&q, &l, 3), true).unwrap();
        prop_assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
    }
}

fn identity_first_spec() -> NetworkSpec {
    NetworkSpec::new(
        vec![6],
        vec![
            LayerSpec::Dense { inputs: 6, outputs: 6, activation: Activation::Identity },
            LayerSpec::Dense { inputs: 6, outputs: 4, activation: Activation::Relu },
            LayerSpec::Dense { inputs: 4, outputs: 3, activation: Activation::Identity },
        ],
    )
    .unwrap()
}

#[test]
fn profile_covers_every_layer_and_identity_layer_matches_input() {
    let spec = identity_first_spec();
    let mut backbone = Backbone::<f64>::init(spec, &mut RngStream::new(4, StreamId::BackboneInit)).unwrap();
    // Make layer 0 the identity map.
    let first = backbone.params.layer_mut(0).unwrap();
    let mut eye = vec![0.0; 36];
    for i in 0..6 {
        eye[i * 7] = 1.0;
    }
    first.weight = Tensor::new(&[6, 6], eye).unwrap();
    first.bias = Tensor::zeros(&[6]);

    let (p, l) = gaussian_cloud(90, 6, 3, 8);
    let flat: Vec<f64> = p.iter().flatten().copied().collect();
    let images = Tensor::new(&[90, 6], flat).unwrap();
    let opts = GdvOptions { max_per_class: None, ..GdvOptions::default() };
    let report = gdv::gdv_profile(&backbone, &images, &l, 3, &opts).unwrap();
    assert_eq!(report.layers.len(), backbone.spec.len());
    let raw = gdv::gdv(&rep(&p, &l, 3), true).unwrap();
    assert!((report.layers[0].gdv - raw).abs() < 1e-12);
    assert_eq!(report.layers[1].dim, 4);

    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer_index,layer_kind,gdv,D,n_points"));
    assert_eq!(lines.count(), 3);

    // Relabeling class names leaves every layer's value unchanged.
    let l2: Vec<usize> = l.iter().map(|&k| (k + 1) % 3).collect();
    let relabeled = gdv::gdv_profile(&backbone, &images, &l2, 3, &opts).unwrap();
    for (a, b) in report.layers.iter().zip(&relabeled.layers) {
        assert_eq!(a.gdv.to_bits(), b.gdv.to_bits());
    }
}

#[test]
fn profile_on_conv_net_and_subsampling() {
    let spec = nn::lenet5_spec(10).unwrap();
    let backbone = Backbone::<f32>::init(spec, &mut RngStream::new(2, StreamId::BackboneInit)).unwrap();
    let mut rng = RngStream::new(3, StreamId::Augment);
    let n = 60;
    let data: Vec<f32> = (0..n * 784).map(|_| rng.uniform() as f32).collect();
    let images = Tensor::new(&[n, 1, 28, 28], data).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let opts = GdvOptions { max_per_class: Some(4), batch_size: 16, ..GdvOptions::default() };
    let report = gdv::gdv_profile(&backbone, &images, &labels, 10, &opts).unwrap();
    assert_eq!(report.layers.len(), 7);
    assert!(report.layers.iter().all(|r| r.n_points == 40 && r.gdv.is_finite()));
    assert_eq!(report.layers[0].dim, 6 * 28 * 28);
}
