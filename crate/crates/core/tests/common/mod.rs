#![allow(dead_code)]

use genrec::cosette::{
    collaborative_latent, collaborative_loss, quantize_levels, reconstruction_loss, Cosette, CosetteConfig,
};
use genrec::data::batch_cooccurrence;
use genrec::marius::{CodeMatrix, Marius, MariusConfig};
use genrec::sasrecpp::{ItemMatrix, LossMode, Sasrec, SasrecConfig};
use genrec_substrate::gradcheck::{check_params, GradCheckReport};
use genrec_substrate::nn::trunc_normal;
use genrec_substrate::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const GRAD_TOL: f64 = 1e-4;
const H: f64 = 1e-4;
const PROBES: usize = 24;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_cosette() -> CosetteConfig {
    CosetteConfig {
        input_dim: 6,
        hidden: vec![8],
        latent_dim: 4,
        levels: 2,
        codebook_size: 3,
        ..CosetteConfig::default()
    }
}

fn content(rows: usize, seed: u64) -> Tensor<f64> {
    trunc_normal(&[rows, 6], 1.0, &mut rng(seed))
}

pub fn grad_quantization() -> GradCheckReport {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(1);
    let z = store.add("latent", trunc_normal(&[5, 4], 1.0, &mut r), false);
    let books: Vec<_> =
        (0..3).map(|l| store.add(&format!("book{l}"), trunc_normal(&[3, 4], 1.0, &mut r), false)).collect();
    check_params(&mut store, H, PROBES, |g, st| {
        let z = g.param(st, z);
        quantize_levels(g, st, &books, z, 0.25).loss
    })
}

pub fn grad_reconstruction() -> GradCheckReport {
    let mut store = ParamStore::<f64>::new();
    let model = Cosette::new(&mut store, tiny_cosette(), &mut rng(2));
    let x = content(5, 3);
    check_params(&mut store, H, PROBES, |g, st| {
        let e = g.constant(x.clone());
        let z = model.encode(g, st, e);
        let q = quantize_levels(g, st, &model.codebooks, z, 0.25);
        let target = g.value(q.zhat).clone();
        let zs = g.straight_through(z, target);
        let e_hat = model.decode(g, st, zs);
        reconstruction_loss(g, e, e_hat)
    })
}

fn cooccurrence() -> genrec::data::CooccurrenceBatch {
    batch_cooccurrence(&[vec![0, 1, 2], vec![2, 3], vec![4, 5], vec![5]]).unwrap()
}

pub fn grad_collaborative() -> GradCheckReport {
    let mut store = ParamStore::<f64>::new();
    let model = Cosette::new(&mut store, tiny_cosette(), &mut rng(4));
    let batch = cooccurrence();
    let x = content(batch.len(), 5);
    check_params(&mut store, H, PROBES, |g, st| {
        let e = g.constant(x.clone());
        let z = model.encode(g, st, e);
        let q = quantize_levels(g, st, &model.codebooks, z, 0.25);
        let zc = collaborative_latent(g, z, q.zhat);
        let t = g.param(st, model.t_prime);
        let b = g.param(st, model.bias);
        collaborative_loss(g, zc, &batch, t, b).unwrap()
    })
}

pub fn grad_cosette_total() -> GradCheckReport {
    let mut store = ParamStore::<f64>::new();
    let model = Cosette::new(&mut store, CosetteConfig { lambda: 0.5, ..tiny_cosette() }, &mut rng(6));
    let batch = cooccurrence();
    let x = content(5, 7);
    let xc = content(batch.len(), 8);
    check_params(&mut store, H, PROBES, |g, st| model.loss(g, st, &x, Some((&xc, &batch))).unwrap().total)
}

pub fn tiny_marius() -> MariusConfig {
    MariusConfig {
        codebook_size: 4,
        levels: 3,
        d_temporal: 8,
        temporal_layers: 2,
        d_depth: 8,
        depth_layers: 2,
        head_dim: 4,
        max_len: 8,
        steps: 10,
        warmup_steps: 1,
        ..MariusConfig::default()
    }
}

pub fn grad_marius() -> GradCheckReport {
    let mut store = ParamStore::<f64>::new();
    let model = Marius::new(&mut store, tiny_marius(), &mut rng(9)).unwrap();
    let seqs =
        vec![vec![vec![0, 1, 2], vec![3, 3, 0], vec![1, 0, 2], vec![2, 2, 1]], vec![vec![1, 1, 1], vec![0, 3, 2]]];
    let m = CodeMatrix::from_tuples(&seqs, 3);
    check_params(&mut store, H, PROBES, |g, st| model.loss(g, st, &m).unwrap())
}

fn grad_sasrec(loss: LossMode, seed: u64) -> GradCheckReport {
    let cfg = SasrecConfig {
        d_model: 8,
        head_dim: 4,
        max_len: 8,
        loss,
        negatives: 3,
        temperature: 0.5,
        ..SasrecConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let model = Sasrec::new(&mut store, cfg, 8, &mut rng(seed)).unwrap();
    let seqs: Vec<&[usize]> = vec![&[0, 1, 2, 3, 4], &[5, 6, 7], &[2, 7]];
    let m = ItemMatrix::left_padded(&seqs);
    check_params(&mut store, H, PROBES, |g, st| model.loss(g, st, &m, &mut rng(77)).unwrap())
}

pub fn grad_sasrec_full_ce() -> GradCheckReport {
    grad_sasrec(LossMode::FullCe, 10)
}

pub fn grad_sasrec_infonce() -> GradCheckReport {
    grad_sasrec(LossMode::SampledInfonce, 11)
}

pub fn grad_sasrec_bce() -> GradCheckReport {
    grad_sasrec(LossMode::BceOneNegative, 12)
}

pub fn all_gradchecks() -> Vec<(&'static str, GradCheckReport)> {
    vec![
        ("quantization", grad_quantization()),
        ("reconstruction", grad_reconstruction()),
        ("collaborative", grad_collaborative()),
        ("cosette_total", grad_cosette_total()),
        ("marius_ce", grad_marius()),
        ("sasrec_full_ce", grad_sasrec_full_ce()),
        ("sasrec_infonce", grad_sasrec_infonce()),
        ("sasrec_bce", grad_sasrec_bce()),
    ]
}

/// Beam search with `B = K^L` against exhaustive scoring of every tuple by
/// teacher-forced log-probability. Returns the largest score gap, or a
/// description of the first ordering mismatch.
pub fn beam_vs_exhaustive(seed: u64) -> Result<f64, String> {
    use genrec_substrate::Graph;
    let cfg = MariusConfig { temporal_dropout: 0.0, depth_dropout: 0.0, ..tiny_marius() };
    let (k, levels) = (cfg.codebook_size, cfg.levels);
    let mut store = ParamStore::<f64>::new();
    // wider init so the ranking is not a near-tie
    let model = Marius::new(&mut store, cfg, &mut rng(seed)).unwrap();
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut r = rng(seed + 1);
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = trunc_normal(&shape, 0.5, &mut r);
    }
    let history = vec![vec![1, 2, 3], vec![0, 0, 1], vec![3, 1, 2]];
    let space = k.pow(levels as u32);
    let beams = model.beam_search(&store, std::slice::from_ref(&history), space, space).map_err(|e| e.to_string())?;

    let tuples: Vec<Vec<usize>> = (0..space)
        .map(|mut x| {
            let mut t = vec![0; levels];
            for l in (0..levels).rev() {
                t[l] = x % k;
                x /= k;
            }
            t
        })
        .collect();
    let m = CodeMatrix::from_tuples(&[history], levels);
    let mut g = Graph::<f64>::eval();
    let h = model.temporal_hidden(&mut g, &store, &m, None).unwrap();
    let last = g.gather_rows(h, &[m.len - 1]);
    let hp = model.projection.forward(&mut g, &store, last);
    let hp = g.gather_rows(hp, &vec![0; space]);
    let refs: Vec<&[usize]> = tuples.iter().map(Vec::as_slice).collect();
    let logits = model.depth_logits(&mut g, &store, hp, &refs).unwrap();
    let lv = g.value(logits);
    let mut scored: Vec<(f64, Vec<usize>)> = tuples
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let s = (0..levels)
                .map(|l| {
                    let row: Vec<f64> = lv.row(i * levels + l)[l * k..(l + 1) * k].to_vec();
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    row[t[l]] - lse
                })
                .sum();
            (s, t.clone())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let got = &beams[0];
    if got.len() != space {
        return Err(format!("{} beams for {space} tuples", got.len()));
    }
    let mut gap: f64 = 0.0;
    for (i, (b, (s, t))) in got.iter().zip(&scored).enumerate() {
        if &b.codes != t {
            return Err(format!("rank {i}: beam {:?} vs exhaustive {:?}", b.codes, t));
        }
        gap = gap.max((b.log_prob - s).abs());
    }
    Ok(gap)
}

/// Largest gap between cached incremental outputs and full recomputation
/// over `cases` random prefixes, for the temporal and the depth stack.
pub fn cache_equivalence(cases: usize, seed: u64) -> (f64, f64) {
    use genrec_substrate::{Graph, SeqLayout};
    use rand::Rng;
    let cfg = MariusConfig { codebook_size: 8, levels: 4, max_len: 12, ..tiny_marius() };
    let (k, levels) = (cfg.codebook_size, cfg.levels);
    let mut store = ParamStore::<f32>::new();
    let model = Marius::new(&mut store, cfg, &mut rng(seed)).unwrap();
    let mut r = rng(seed + 1);
    let (mut temporal, mut depth) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < cases {
        let batch = 4.min(cases - done);
        let seqs: Vec<Vec<Vec<usize>>> = (0..batch)
            .map(|_| (0..r.gen_range(1..=12)).map(|_| (0..levels).map(|_| r.gen_range(0..k)).collect()).collect())
            .collect();
        let m = CodeMatrix::from_tuples(&seqs, levels);
        let mut g = Graph::<f32>::eval();
        let full = model.temporal_hidden(&mut g, &store, &m, None).unwrap();
        let full = g.value(full).clone();

        let mut cache = model.temporal.new_cache(batch);
        for p in 0..m.len {
            let col: Vec<usize> = (0..batch).map(|b| b * m.len + p).collect();
            let step = CodeMatrix {
                batch,
                len: 1,
                levels,
                codes: col.iter().flat_map(|&i| m.codes[i * levels..(i + 1) * levels].to_vec()).collect(),
                valid: col.iter().map(|&i| m.valid[i]).collect(),
            };
            let mut g = Graph::<f32>::eval();
            let h = model.temporal_hidden(&mut g, &store, &step, Some(&mut cache)).unwrap();
            for (b, &i) in col.iter().enumerate() {
                if m.valid[i] {
                    for (a, c) in g.value(h).row(b).iter().zip(full.row(i)) {
                        temporal = temporal.max((a - c).abs() as f64);
                    }
                }
            }
        }

        let targets: Vec<Vec<usize>> = (0..batch).map(|_| (0..levels).map(|_| r.gen_range(0..k)).collect()).collect();
        let refs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        let mut g = Graph::<f32>::eval();
        let last: Vec<usize> = (0..batch).map(|b| b * m.len + m.len - 1).collect();
        let hv = g.constant(full.clone());
        let h = g.gather_rows(hv, &last);
        let hp = model.projection.forward(&mut g, &store, h);
        let hp_value = g.value(hp).clone();
        let logits = model.depth_logits(&mut g, &store, hp, &refs).unwrap();
        let full_logits = g.value(logits).clone();

        let mut cache = model.depth.new_cache(batch);
        let table = store.value(model.depth_embedding).clone();
        let mut input = hp_value;
        for l in 0..levels {
            let mut g = Graph::<f32>::eval();
            let x = g.constant(input);
            let hd = model.depth.forward(&mut g, &store, x, &SeqLayout::dense(batch, 1), Some(&mut cache)).unwrap();
            let lg = model.head.forward(&mut g, &store, hd);
            for b in 0..batch {
                for (a, c) in g.value(lg).row(b).iter().zip(full_logits.row(b * levels + l)) {
                    depth = depth.max((a - c).abs() as f64);
                }
            }
            let rows: Vec<f32> = targets.iter().flat_map(|t| table.row(l * k + t[l]).to_vec()).collect();
            input = Tensor::new(&[batch, table.cols()], rows).unwrap();
        }
        done += batch;
    }
    (temporal, depth)
}

/// Recall and NDCG from the metric functions against a brute-force rank
/// count on random score lists. Returns the number of disagreements.
pub fn metric_oracle(lists: usize, seed: u64) -> usize {
    use genrec::eval::{ndcg_at_k, recall_at_k};
    use rand::Rng;
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..lists {
        let n = r.gen_range(1..60);
        let scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0..20) as f64) / 4.0).collect();
        let target = r.gen_range(0..n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let list: Vec<Option<usize>> = order.iter().map(|&i| Some(i)).collect();
        let rank =
            1 + (0..n).filter(|&j| scores[j] > scores[target] || (scores[j] == scores[target] && j < target)).count();
        for k in [1, 5, 10, 20, 50] {
            let want_r = if rank <= k { 1.0 } else { 0.0 };
            let want_n = if rank <= k { 1.0 / ((rank + 1) as f64).log2() } else { 0.0 };
            if recall_at_k(&list, target, k).unwrap() != want_r
                || (ndcg_at_k(&list, target, k).unwrap() - want_n).abs() > 1e-15
            {
                bad += 1;
            }
        }
    }
    bad
}

/// Empirical next-cluster distribution of generated timelines against the
/// planted transition rows; largest total variation over rows with at
/// least `min_samples` transitions, and the number of such rows.
pub fn planted_transition_tv(min_samples: usize) -> (f64, usize) {
    use genrec::data::make_synthetic_dataset;
    let s = make_synthetic_dataset(200, 4000, 1, 5).unwrap();
    let c = s.chain.n_clusters();
    let mut counts = vec![vec![0usize; c]; c];
    for t in s.dataset.timelines() {
        for w in t.windows(2) {
            counts[s.item_cluster[w[0].item]][s.item_cluster[w[1].item]] += 1;
        }
    }
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for (src, row) in counts.iter().enumerate() {
        let n: usize = row.iter().sum();
        if n < min_samples {
            continue;
        }
        rows += 1;
        let planted = &s.chain.transition[s.chain.row_for(&[src])];
        let tv = 0.5 * row.iter().zip(planted).map(|(&x, &p)| (x as f64 / n as f64 - p).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    (worst, rows)
}

fn dyadic_book(l: usize, c: usize, d: usize) -> f64 {
    let s = [8.0, 1.0, 0.125][l];
    s * ((c * 3 + d * 7 + c * d) % 5) as f64 - 2.0 * s
}

fn planted_books(dim: usize, zero_row: bool) -> Vec<Vec<f64>> {
    (0..3)
        .map(|l| {
            (0..4)
                .flat_map(|c| {
                    (0..dim).map(move |d| if zero_row && l > 0 && c == 0 { 0.0 } else { dyadic_book(l, c, d) })
                })
                .collect()
        })
        .collect()
}

/// Quantization loss of latents that equal a level-0 codeword when every
/// deeper codebook holds a zero codeword, so each residual is exact.
pub fn planted_quantization_loss() -> f64 {
    use genrec_substrate::Graph;
    let dim = 3;
    let books = planted_books(dim, true);
    let z: Vec<f64> = [2, 0, 3, 1].iter().flat_map(|&c| books[0][c * dim..(c + 1) * dim].to_vec()).collect();
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<_> = books
        .iter()
        .enumerate()
        .map(|(l, b)| store.add(&format!("b{l}"), Tensor::new(&[4, dim], b.clone()).unwrap(), false))
        .collect();
    let mut g = Graph::<f64>::eval();
    let zv = g.constant(Tensor::new(&[4, dim], z).unwrap());
    let q = quantize_levels(&mut g, &store, &ids, zv, 0.25);
    g.value(q.loss).item()
}

/// Latents planted as one codeword per level on codebooks whose scales
/// separate the levels; true when greedy quantization recovers every code
/// and leaves a zero final residual.
pub fn planted_codes_recovered() -> bool {
    use genrec::cosette::residual_quantize;
    let dim = 3;
    let books = planted_books(dim, false);
    let picks = [[0, 1, 2], [3, 3, 0], [1, 0, 3], [2, 2, 2], [3, 1, 1]];
    picks.iter().all(|p| {
        let z: Vec<f64> = (0..dim).map(|d| (0..3).map(|l| dyadic_book(l, p[l], d)).sum()).collect();
        let q = residual_quantize(&z, &books);
        q.codes == p && q.final_residual().iter().all(|&r| r == 0.0)
    })
}

/// Reallocation on random drafts with heavy collisions; returns
/// (items, colliding drafts, duplicate pairs after reallocation) using a
/// quadratic scan.
pub fn reallocation_scan(items: usize, seed: u64) -> (usize, usize, usize) {
    use genrec::cosette::{reallocate_collisions, residual_quantize};
    let (k, levels, dim) = (8, 4, 4);
    let mut r = rng(seed);
    let books: Vec<Vec<f64>> = (0..levels).map(|_| trunc_normal::<f64>(&[k, dim], 1.0, &mut r).into_data()).collect();
    let results: Vec<_> =
        (0..items).map(|_| residual_quantize(trunc_normal::<f64>(&[dim], 1.0, &mut r).data(), &books)).collect();
    let colliding = (0..items).filter(|&i| (0..items).any(|j| j != i && results[j].codes == results[i].codes)).count();
    let table = reallocate_collisions(&results, &books, k).unwrap();
    let codes = table.all_codes();
    let mut dup = 0;
    for i in 0..codes.len() {
        for j in i + 1..codes.len() {
            dup += usize::from(codes[i] == codes[j]);
        }
    }
    (codes.len(), colliding, dup)
}

/// Collaborative loss on a four-item batch from the library and from a
/// direct scalar evaluation of the formula.
pub fn collaborative_oracle() -> (f64, f64) {
    use genrec_substrate::Graph;
    let batch = batch_cooccurrence(&[vec![0, 1], vec![1, 2], vec![3]]).unwrap();
    let z = [[0.3, -1.2, 0.5], [1.1, 0.4, -0.7], [-0.2, 0.9, 0.8], [0.6, 0.6, -0.1]];
    let (tp, b) = (2.0f64, -8.0f64);
    let mut g = Graph::<f64>::eval();
    let zv = g.constant(Tensor::new(&[4, 3], z.iter().flatten().copied().collect()).unwrap());
    let t = g.constant(Tensor::scalar(tp));
    let bv = g.constant(Tensor::scalar(b));
    let l = collaborative_loss(&mut g, zv, &batch, t, bv).unwrap();
    let lib = g.value(l).item();

    let norm = |v: &[f64; 3]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = |i: usize, j: usize| (0..3).map(|d| z[i][d] * z[j][d]).sum::<f64>() / (norm(&z[i]) * norm(&z[j]));
    let pos = [[0, 1, 0, 0], [1, 0, 1, 0], [0, 1, 0, 0], [0, 0, 0, 0]];
    let mut total = 0.0;
    let mut kept = 0.0;
    for i in 0..4 {
        let yi: usize = pos[i].iter().sum();
        if yi == 0 {
            continue;
        }
        kept += 1.0;
        let mut s = 0.0;
        for j in (0..4).filter(|&j| j != i) {
            let y = if pos[i][j] == 1 { 1.0 } else { -1.0 };
            s += (1.0 + (y * (-tp.exp() * cos(i, j) + b)).exp()).ln();
        }
        total += s / yi as f64;
    }
    (lib, total / kept)
}

/// The loss of two identical co-occurring unit vectors.
pub fn collaborative_identical_pair() -> f64 {
    use genrec_substrate::Graph;
    let batch = batch_cooccurrence(&[vec![0, 1]]).unwrap();
    let mut g = Graph::<f64>::eval();
    let z = g.constant(Tensor::from_f64(&[2, 2], &[0.6, 0.8, 0.6, 0.8]).unwrap());
    let t = g.constant(Tensor::scalar(2.0));
    let b = g.constant(Tensor::scalar(-8.0));
    let l = collaborative_loss(&mut g, z, &batch, t, b).unwrap();
    g.value(l).item()
}
