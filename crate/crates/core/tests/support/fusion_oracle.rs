//! Reference implementations of the six fusion rules, written for clarity
//! rather than speed, plus the exhaustive and randomized comparison suites.

#![allow(dead_code)]

use nsnet::fusion::{
    fuse_index_intersect, fuse_index_join, fuse_index_union, fuse_scores, select_topk,
    FusionMode,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ratios as exact fractions so the oracle's ceilings avoid floating point.
pub const RATIOS: [(usize, usize); 6] = [(0, 1), (1, 4), (1, 2), (3, 5), (3, 4), (1, 1)];

/// Position of every frame in the descending order, counted directly.
fn positions(s: &[f64]) -> Vec<usize> {
    (0..s.len())
        .map(|i| {
            (0..s.len())
                .filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i))
                .count()
        })
        .collect()
}

pub fn ranking(s: &[f64]) -> Vec<usize> {
    let pos = positions(s);
    let mut out = vec![usize::MAX; s.len()];
    for (i, &p) in pos.iter().enumerate() {
        out[p] = i;
    }
    out
}

pub fn ref_topk(s: &[f64], k: usize) -> Vec<usize> {
    ranking(s)[..k].to_vec()
}

pub fn ref_fused(s_f: &[f64], s_v: &[f64], mode: FusionMode, ratio: f64) -> Vec<f64> {
    (0..s_f.len())
        .map(|i| match mode {
            FusionMode::ScoreAdd => ratio * s_f[i] + (1.0 - ratio) * s_v[i],
            FusionMode::ScoreMul => s_f[i] * s_v[i],
            FusionMode::ScoreMax => {
                if s_f[i] >= s_v[i] {
                    s_f[i]
                } else {
                    s_v[i]
                }
            }
            _ => unreachable!(),
        })
        .collect()
}

pub fn ref_intersect(s_f: &[f64], s_v: &[f64], k: usize) -> Vec<usize> {
    let (pf, pv) = (ranking(s_f), ranking(s_v));
    let mut chosen: Vec<usize> = pf[..k].iter().copied().filter(|x| pv[..k].contains(x)).collect();
    let (mut a, mut b) = (k, k);
    let mut turn_f = true;
    while chosen.len() < k {
        if turn_f {
            while a < pf.len() && chosen.contains(&pf[a]) {
                a += 1;
            }
            if a < pf.len() {
                chosen.push(pf[a]);
                a += 1;
            }
        } else {
            while b < pv.len() && chosen.contains(&pv[b]) {
                b += 1;
            }
            if b < pv.len() {
                chosen.push(pv[b]);
                b += 1;
            }
        }
        turn_f = !turn_f;
    }
    chosen
}

pub fn ref_union(s_f: &[f64], s_v: &[f64], k: usize, (num, den): (usize, usize)) -> Vec<usize> {
    let (pf, pv) = (ranking(s_f), ranking(s_v));
    let n_f = (k * num).div_ceil(den);
    let n_v = (k * (den - num)).div_ceil(den);
    let head: Vec<usize> = pf[..n_f].to_vec();
    let mut extra: Vec<usize> = pv[..n_v].iter().copied().filter(|x| !head.contains(x)).collect();
    while head.len() + extra.len() > k {
        extra.pop();
    }
    let mut out = head;
    out.extend(extra);
    for &x in &pf {
        if out.len() >= k {
            break;
        }
        if !out.contains(&x) {
            out.push(x);
        }
    }
    out
}

pub fn ref_join(s_f: &[f64], s_v: &[f64], k: usize) -> Vec<usize> {
    // (score, from_v, frame); pick the best remaining entry by linear scan
    let mut pool: Vec<(f64, bool, usize)> = Vec::new();
    for i in 0..s_f.len() {
        pool.push((s_f[i], false, i));
    }
    for i in 0..s_v.len() {
        pool.push((s_v[i], true, i));
    }
    let better = |x: &(f64, bool, usize), y: &(f64, bool, usize)| {
        x.0 > y.0 || (x.0 == y.0 && (!x.1 && y.1 || (x.1 == y.1 && x.2 < y.2)))
    };
    let mut out = Vec::new();
    while out.len() < k {
        let mut best = 0;
        for j in 1..pool.len() {
            if better(&pool[j], &pool[best]) {
                best = j;
            }
        }
        let e = pool.remove(best);
        if !out.contains(&e.2) {
            out.push(e.2);
        }
    }
    out
}

/// Compares every mode on one input; returns the number of comparisons.
pub fn check_case(s_f: &[f64], s_v: &[f64], k: usize) -> Result<usize, String> {
    let mut n = 0;
    let mismatch = |what: &str, got: &[usize], want: &[usize]| {
        format!("{what}: s_f={s_f:?} s_v={s_v:?} K={k}: got {got:?}, want {want:?}")
    };
    for mode in [FusionMode::ScoreMul, FusionMode::ScoreMax] {
        let got = select_topk(&fuse_scores(s_f, s_v, mode, 0.6).unwrap(), k).unwrap();
        let want = ref_topk(&ref_fused(s_f, s_v, mode, 0.6), k);
        if got != want {
            return Err(mismatch(mode.name(), &got, &want));
        }
        n += 1;
    }
    for (num, den) in RATIOS {
        let r = num as f64 / den as f64;
        let got = select_topk(&fuse_scores(s_f, s_v, FusionMode::ScoreAdd, r).unwrap(), k).unwrap();
        let want = ref_topk(&ref_fused(s_f, s_v, FusionMode::ScoreAdd, r), k);
        if got != want {
            return Err(mismatch(&format!("score_add α={r}"), &got, &want));
        }
        let got = fuse_index_union(s_f, s_v, k, r).unwrap();
        let want = ref_union(s_f, s_v, k, (num, den));
        if got != want {
            return Err(mismatch(&format!("index_union α={r}"), &got, &want));
        }
        n += 2;
    }
    let got = fuse_index_intersect(s_f, s_v, k).unwrap();
    let want = ref_intersect(s_f, s_v, k);
    if got != want {
        return Err(mismatch("index_intersect", &got, &want));
    }
    let got = fuse_index_join(s_f, s_v, k).unwrap();
    let want = ref_join(s_f, s_v, k);
    if got != want {
        return Err(mismatch("index_join", &got, &want));
    }
    Ok(n + 2)
}

fn check_pairs(patterns: &[Vec<f64>], others: &[Vec<f64>]) -> Result<usize, String> {
    let mut n = 0;
    for a in patterns {
        for b in others {
            for k in 1..=a.len().min(4) {
                n += check_case(a, b, k)?;
            }
        }
    }
    Ok(n)
}

fn permutations(t: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..t).collect();
    heap(t, &mut cur, &mut out);
    out
}

fn heap(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<f64>>) {
    if k <= 1 {
        out.push(a.iter().map(|&x| x as f64).collect());
        return;
    }
    for i in 0..k {
        heap(k - 1, a, out);
        let j = if k % 2 == 0 { i } else { 0 };
        a.swap(j, k - 1);
    }
}

/// All score tuples over a small alphabet, ties included.
fn tuples(t: usize, alphabet: usize) -> Vec<Vec<f64>> {
    let total = alphabet.pow(t as u32);
    (0..total)
        .map(|mut code| {
            (0..t)
                .map(|_| {
                    let d = code % alphabet;
                    code /= alphabet;
                    d as f64
                })
                .collect()
        })
        .collect()
}

/// Exhaustive rank patterns for T ≤ 6, K ≤ 4.
pub fn exhaustive_suite() -> Result<usize, String> {
    let mut n = 0;
    for t in 1..=4 {
        let all = tuples(t, t);
        n += check_pairs(&all, &all)?;
    }
    let p5 = permutations(5);
    n += check_pairs(&p5, &p5)?;
    let ties5 = tuples(5, 3);
    n += check_pairs(&ties5, &ties5)?;
    // frames are exchangeable once ties are absent, so one side may be fixed
    let p6 = permutations(6);
    let ident: Vec<f64> = (0..6).map(|x| x as f64).collect();
    n += check_pairs(&[ident.clone()], &p6)?;
    n += check_pairs(&p6, &[ident])?;
    let ties6 = tuples(6, 2);
    n += check_pairs(&ties6, &ties6)?;
    Ok(n)
}

pub fn randomized_suite(seed: u64, cases: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut n = 0;
    for _ in 0..cases {
        let t = rng.random_range(1..=24);
        let quantized = rng.random_bool(0.3);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..t)
                .map(|_| {
                    if quantized {
                        f64::from(rng.random_range(0..4u8)) / 4.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect()
        };
        let s_f = draw(&mut rng);
        let s_v = draw(&mut rng);
        let k = rng.random_range(1..=t);
        n += check_case(&s_f, &s_v, k)?;
    }
    Ok(n)
}
