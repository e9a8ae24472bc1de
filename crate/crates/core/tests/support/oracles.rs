//! Independent reference computations shared by the integration tests and
//! the acceptance runner. Each check returns the measured discrepancy so
//! callers choose the sample sizes and tolerances.

#![allow(dead_code)]

use std::collections::BTreeMap;

use vroute_core::data::{generate_domain, Dataset, DomainKind, SyntheticDomainSpec};
use vroute_core::model::{elbo_loss, stage1_train, stage2_train, MoEClassifier, ModelConfig, TrainConfig};
use vroute_core::numerics::{Graph, RngStream, Role, Tensor};
use vroute_core::routers::router::{vglr_decide, vtsr_decide, GraphOpts, GumbelPath, Mode};
use vroute_core::routers::{
    gumbel_top_k, kl_fc, kl_mf, kl_vtsr, sample_k_without_replacement, top_k_mask, GaussianPosterior, RouterConfig,
    RouterVariant,
};

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn random_simplex(n: usize, rng: &mut RngStream) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -(rng.uniform().max(1e-300)).ln()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

fn random_lower(n: usize, rng: &mut RngStream) -> Tensor {
    let mut l = Tensor::zeros(&[n, n]);
    for r in 0..n {
        for c in 0..r {
            l.data_mut()[r * n + c] = 0.3 * rng.standard_normal();
        }
        l.data_mut()[r * n + r] = (rng.uniform() * 1.5 - 1.0).exp();
    }
    l
}

/// Solves `L y = b` by forward substitution.
fn forward_solve(l: &Tensor, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|j| l.get2(i, j) * y[j]).sum();
        y[i] = (b[i] - s) / l.get2(i, i);
    }
    y
}

/// Monte Carlo `E_q[log q(x) - log p(x)]` with `x` drawn by the posterior's
/// own sampler around zero logits and both log densities evaluated directly.
pub fn mc_kl(post: &GaussianPosterior, draws: usize, rng: &mut RngStream) -> f64 {
    let n = post.n();
    let zero = vec![0.0; n];
    let l = match &post.scale {
        vroute_core::routers::PosteriorScale::Diagonal(s) => {
            let mut t = Tensor::zeros(&[n, n]);
            (0..n).for_each(|i| t.data_mut()[i * n + i] = s[i]);
            t
        }
        vroute_core::routers::PosteriorScale::Cholesky(l) => l.clone(),
    };
    let log_det: f64 = (0..n).map(|i| l.get2(i, i).ln()).sum();
    let mut acc = 0.0;
    for _ in 0..draws {
        let x = post.sample(&zero, &rng.normals(n));
        let centred: Vec<f64> = x.iter().zip(&post.delta_mu).map(|(a, m)| a - m).collect();
        let z = forward_solve(&l, &centred);
        let log_q = -0.5 * z.iter().map(|v| v * v).sum::<f64>() - log_det;
        let log_p = -0.5 * x.iter().map(|v| v * v).sum::<f64>();
        acc += log_q - log_p;
    }
    acc / draws as f64
}

/// Largest relative error of `kl_mf` and `kl_fc` against [`mc_kl`] over
/// `count` random posteriors of each kind with `N ≤ 8`.
pub fn kl_gaussian_max_rel_err(count: usize, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = RngStream::new(seed, 0);
    let (mut mf, mut fc) = (0.0f64, 0.0f64);
    for i in 0..count {
        let n = 1 + i % 8;
        let mu: Vec<f64> = rng.normals(n);
        let sigma: Vec<f64> = (0..n).map(|_| (rng.uniform() * 1.5 - 1.0).exp()).collect();
        let post = GaussianPosterior::diagonal(mu.clone(), sigma.clone()).unwrap();
        let exact = kl_mf(&mu, &sigma).unwrap();
        mf = mf.max(rel_err(exact, mc_kl(&post, draws, &mut rng)));

        let l = random_lower(n, &mut rng);
        let post = GaussianPosterior::cholesky(mu.clone(), l.clone()).unwrap();
        let exact = kl_fc(&mu, &l).unwrap();
        fc = fc.max(rel_err(exact, mc_kl(&post, draws, &mut rng)));
    }
    (mf, fc)
}

/// Largest `|KL(q‖U) + H(q) - log N|` over random simplex points.
pub fn kl_vtsr_identity_max_err(points: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 1);
    (0..points)
        .map(|i| {
            let n = 2 + i % 39;
            let q = random_simplex(n, &mut rng);
            let h: f64 = q.iter().map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 }).sum();
            (kl_vtsr(&q).unwrap() + h - (n as f64).ln()).abs()
        })
        .fold(0.0, f64::max)
}

/// Probability of every `k`-subset under sequential draws without
/// replacement, by summing over all ordered draw sequences.
pub fn enumerate_subsets(p: &[f64], k: usize) -> BTreeMap<Vec<usize>, f64> {
    fn walk(p: &[f64], k: usize, picked: &mut Vec<usize>, prob: f64, mass: f64, out: &mut BTreeMap<Vec<usize>, f64>) {
        if picked.len() == k {
            let mut key = picked.clone();
            key.sort_unstable();
            *out.entry(key).or_insert(0.0) += prob;
            return;
        }
        for i in 0..p.len() {
            if picked.contains(&i) || p[i] == 0.0 {
                continue;
            }
            picked.push(i);
            walk(p, k, picked, prob * p[i] / mass, mass - p[i], out);
            picked.pop();
        }
    }
    let mut out = BTreeMap::new();
    walk(p, k, &mut Vec::new(), 1.0, 1.0, &mut out);
    out
}

fn total_variation(exact: &BTreeMap<Vec<usize>, f64>, counts: &BTreeMap<Vec<usize>, usize>, draws: usize) -> f64 {
    let mut keys: Vec<&Vec<usize>> = exact.keys().chain(counts.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys
        .into_iter()
        .map(|k| {
            let e = exact.get(k).copied().unwrap_or(0.0);
            let f = counts.get(k).copied().unwrap_or(0) as f64 / draws as f64;
            (e - f).abs()
        })
        .sum::<f64>()
}

fn mask_key(mask: &[bool]) -> Vec<usize> {
    (0..mask.len()).filter(|&i| mask[i]).collect()
}

/// Worst total variation of Sample-K and Gumbel-Top-K subset frequencies
/// against [`enumerate_subsets`] over every `N ≤ 6`, `K ≤ min(3, N)`.
pub fn sampler_max_tv(draws: usize, seed: u64) -> (f64, f64) {
    let (mut sk, mut gk) = (0.0f64, 0.0f64);
    for n in 1..=6 {
        for k in 1..=n.min(3) {
            let mut rng = RngStream::new(seed, (n * 10 + k) as u64);
            let p = random_simplex(n, &mut rng);
            let exact = enumerate_subsets(&p, k);
            let logits: Vec<f64> = p.iter().map(|x| x.ln()).collect();
            let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
            for _ in 0..draws {
                let m = sample_k_without_replacement(&p, k, &mut rng).unwrap();
                *a.entry(mask_key(&m)).or_insert(0) += 1;
                let g = gumbel_top_k(&logits, k, &mut rng);
                *b.entry(mask_key(&g.mask)).or_insert(0) += 1;
            }
            sk = sk.max(total_variation(&exact, &a, draws));
            gk = gk.max(total_variation(&exact, &b, draws));
        }
    }
    (sk, gk)
}

/// Logits whose sorted consecutive gaps are at least `gap`.
fn gapped_logits(n: usize, gap: f64, rng: &mut RngStream) -> Vec<f64> {
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * (gap + rng.uniform())).collect();
    for i in (1..n).rev() {
        let j = (rng.uniform() * (i + 1) as f64) as usize;
        vals.swap(i, j.min(i));
    }
    vals
}

/// Fractions of trials whose selection equals deterministic Top-K:
/// `[VGLR-MF, VGLR-FC, VTSR eval, VTSR train]`.
pub fn limit_agreement(trials: usize, seed: u64) -> [f64; 4] {
    let mut rng = RngStream::new(seed, 2);
    let mut hits = [0usize; 4];
    for t in 0..trials {
        let n = 2 + t % 7;
        let k = 1 + t % n.min(4);
        let l = rng.normals(n);
        let want = top_k_mask(&l, k);
        let mf = GaussianPosterior::diagonal(vec![0.0; n], vec![1e-8; n]).unwrap();
        let fc_l = random_lower(n, &mut rng).map(|x| x * 1e-8);
        let fc = GaussianPosterior::cholesky(vec![0.0; n], fc_l).unwrap();
        hits[0] += (vglr_decide(l.clone(), &mf, k, 35, &mut rng).unwrap().selection == want) as usize;
        hits[1] += (vglr_decide(l.clone(), &fc, k, 35, &mut rng).unwrap().selection == want) as usize;

        let g = gapped_logits(n, 1.0, &mut rng);
        let want = top_k_mask(&g, k);
        for (slot, mode) in [(2, Mode::Eval), (3, Mode::Train)] {
            let d = vtsr_decide(g.clone(), 1e-4, k, mode, &mut rng).unwrap();
            hits[slot] += (d.selection == want) as usize;
        }
    }
    hits.map(|h| h as f64 / trials as f64)
}

pub fn tiny_model(variant: RouterVariant, seed: u64) -> (MoEClassifier, Dataset) {
    let cfg = ModelConfig {
        features: 4,
        d: 8,
        expert_hidden: 8,
        blocks: 1,
        classes: 3,
        residual: true,
        router: RouterConfig::new(8, 3, 2, RouterVariant::Map),
    };
    let mut model = MoEClassifier::new(cfg.clone(), seed).unwrap();
    let rc = cfg.router.with_variant(variant);
    model.attach_variational_routers(&[0], &rc, seed).unwrap();
    let spec = SyntheticDomainSpec { num_classes: 3, feature_dim: 4, seed, ..Default::default() };
    let data = generate_domain(&spec, 6, 0, DomainKind::Id).unwrap();
    (model, data)
}

fn elbo_value(model: &MoEClassifier, data: &Dataset, keys: &[u64], beta: f64, opts: GraphOpts) -> f64 {
    let g = Graph::new();
    let parts = elbo_loss(&g, model, &data.features, &data.labels, keys, beta, opts).unwrap();
    g.scalar(parts.total)
}

/// Largest relative error between tape gradients of the stage-2 objective
/// and central differences, over every inference-network parameter entry.
/// Returns the error and the number of entries compared.
pub fn elbo_grad_max_rel_err(variant: RouterVariant, seed: u64) -> (f64, usize) {
    let (mut model, data) = tiny_model(variant, seed);
    let keys: Vec<u64> = (0..data.len() as u64).map(|i| i + 17 * seed).collect();
    let beta = 0.1;
    let opts = GraphOpts { gumbel: GumbelPath::Soft, ..GraphOpts::stage2() };
    let g = Graph::new();
    let parts = elbo_loss(&g, &model, &data.features, &data.labels, &keys, beta, opts).unwrap();
    g.backward(parts.total).unwrap();
    let grads = g.param_grads();

    let names: Vec<(String, usize)> =
        model.params().into_iter().filter(|p| p.role == Role::Phi).map(|p| (p.name.clone(), p.value.len())).collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut count = 0;
    for (name, len) in names {
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(&[len]));
        for j in 0..len {
            let bump = |model: &mut MoEClassifier, delta: f64| {
                let p = model.params_mut().into_iter().find(|p| p.name == name).unwrap();
                p.value.data_mut()[j] += delta;
            };
            let orig = model.params().into_iter().find(|p| p.name == name).unwrap().value.data()[j];
            bump(&mut model, h);
            let up = elbo_value(&model, &data, &keys, beta, opts);
            bump(&mut model, -2.0 * h);
            let down = elbo_value(&model, &data, &keys, beta, opts);
            model.params_mut().into_iter().find(|p| p.name == name).unwrap().value.data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            // Entries with no gradient on either side carry no signal.
            let err = if a.abs().max(fd.abs()) < 1e-9 { 0.0 } else { (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) };
            worst = worst.max(err);
            count += 1;
        }
    }
    (worst, count)
}

/// Trains a small model, attaches `variant` and runs stage 2. Returns the
/// names of non-inference parameters whose values changed bitwise.
pub fn freeze_audit(variant: RouterVariant, seed: u64) -> Vec<String> {
    let cfg = ModelConfig {
        features: 6,
        d: 8,
        expert_hidden: 8,
        blocks: 2,
        classes: 3,
        residual: true,
        router: RouterConfig::new(8, 4, 2, RouterVariant::Map),
    };
    let spec = SyntheticDomainSpec { num_classes: 3, feature_dim: 6, seed, ..Default::default() };
    let all = generate_domain(&spec, 120, 0, DomainKind::Id).unwrap();
    let (train, val, _) = all.split(80, 40).unwrap();
    let tc = TrainConfig { epochs_stage1: 2, epochs_stage2: 2, seed, ..Default::default() };
    let mut model = MoEClassifier::new(cfg.clone(), seed).unwrap();
    stage1_train(&mut model, &train, &val, &tc).unwrap();
    model.attach_variational_routers(&[0, 1], &cfg.router.with_variant(variant), seed).unwrap();
    let before: Vec<(String, Vec<u64>)> = snapshot(&model);
    stage2_train(&mut model, &train, &val, &tc).unwrap();
    let after = snapshot(&model);
    before.iter().zip(&after).filter(|(a, b)| a != b).map(|(a, _)| a.0.clone()).collect()
}

fn snapshot(model: &MoEClassifier) -> Vec<(String, Vec<u64>)> {
    model
        .params()
        .into_iter()
        .filter(|p| p.role != Role::Phi)
        .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

/// Brute-force AUROC over every ID/OoD pair, ties counted one half.
pub fn auroc_pairs(id: &[f64], ood: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in id {
        for &b in ood {
            wins += if b > a {
                1.0
            } else if b == a {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (id.len() * ood.len()) as f64
}

/// Average precision by sweeping every distinct score as a threshold.
pub fn auprc_sweep(id: &[f64], ood: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = id.iter().chain(ood).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in thresholds {
        let tp = ood.iter().filter(|&&s| s >= t).count() as f64;
        let fp = id.iter().filter(|&&s| s >= t).count() as f64;
        let recall = tp / ood.len() as f64;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

/// ECE with one pass per bin over explicit bin edges.
pub fn ece_bins(conf: &[f64], correct: &[bool], bins: usize) -> (f64, f64) {
    let n = conf.len() as f64;
    let (mut ece, mut mce) = (0.0f64, 0.0f64);
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let idx: Vec<usize> =
            (0..conf.len()).filter(|&i| conf[i] >= lo && (conf[i] < hi || (b == bins - 1 && conf[i] <= hi))).collect();
        if idx.is_empty() {
            continue;
        }
        let m = idx.len() as f64;
        let acc = idx.iter().filter(|&&i| correct[i]).count() as f64 / m;
        let c = idx.iter().map(|&i| conf[i]).sum::<f64>() / m;
        ece += m / n * (acc - c).abs();
        mce = mce.max((acc - c).abs());
    }
    (ece, mce)
}
