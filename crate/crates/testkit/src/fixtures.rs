//! Oracle-produced fixture files.
//!
//! `cargo run -p nsattn-testkit --bin regen-fixtures` rewrites
//! `crates/testkit/fixtures/*.json`; the `fixtures_in_sync` test fails when
//! the checked-in files drift from what the oracles produce.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::*;

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionFixture {
    pub name: String,
    pub d: usize,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub expected: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanFixture {
    pub name: String,
    /// `(value, mask, priority, payload)` with patterns as hex strings.
    pub entries: Vec<(String, String, i64, u64)>,
    pub signature: String,
    pub expected: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassFixture {
    pub name: String,
    pub d: usize,
    pub q: Vec<f64>,
    pub universe: Vec<Vec<f64>>,
    pub selected_idx: Vec<usize>,
    pub expected_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoMeansFixture {
    pub name: String,
    pub points: Vec<Vec<f64>>,
    pub centroids: Vec<Vec<f64>>,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaFixture {
    pub name: String,
    pub eta: f64,
    pub c0: f64,
    pub u: Vec<u8>,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccumulateFixture {
    pub name: String,
    pub frac_s: u32,
    pub frac_z: u32,
    pub features: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    /// Raw integers after quantize-then-add.
    pub s_raw: Vec<Vec<i64>>,
    pub z_raw: Vec<i64>,
    /// Exact rational sums rendered as f64.
    pub s_exact: Vec<Vec<f64>>,
}

fn gauss(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn gauss_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| gauss(rng, cols, scale)).collect()
}

pub fn attention_fixtures() -> Vec<AttentionFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA77E);
    let mut out = Vec::new();
    let mut push = |name: &str, d: usize, q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, v: Vec<Vec<f64>>| {
        let expected = oracle_exact_attention(&q, &k, &v, d).unwrap();
        out.push(AttentionFixture {
            name: name.into(),
            d,
            q,
            k,
            v,
            expected,
        });
    };
    push(
        "singleton",
        2,
        vec![vec![0.7, -1.2]],
        vec![vec![0.3, 0.4]],
        vec![vec![1.5, -2.0, 0.25]],
    );
    let key = vec![0.2, -0.1, 0.4];
    push(
        "identical-keys",
        3,
        gauss_mat(&mut rng, 2, 3, 1.0),
        vec![key.clone(), key.clone(), key],
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]],
    );
    let q = gauss_mat(&mut rng, 3, 2, 1.0);
    let k = gauss_mat(&mut rng, 3, 2, 1.0);
    let v = gauss_mat(&mut rng, 3, 2, 1.0);
    push("random-t3-d2", 2, q, k, v);
    out
}

pub fn scan_fixtures() -> Vec<ScanFixture> {
    let hex = |x: u128| format!("{x:x}");
    let mk = |name: &str, entries: Vec<ScanEntry>, sig: u128| {
        let expected = oracle_scan_match(&entries, sig).unwrap();
        ScanFixture {
            name: name.into(),
            entries: entries
                .into_iter()
                .map(|(v, m, p, id)| (hex(v), hex(m), p, id))
                .collect(),
            signature: hex(sig),
            expected,
        }
    };
    vec![
        mk("empty", vec![], 0xbeef),
        mk("wildcard", vec![(0x1234, 0, 1, 7)], 0xffff_0000),
        mk(
            "overlapping",
            vec![
                (0x00f0, 0x00f0, 2, 100),
                (0x00f0, 0x00ff, 9, 200),
                (0x0000, 0x0f00, 5, 300),
                (0x0100, 0x0f00, 7, 400),
            ],
            0x00f0,
        ),
    ]
}

pub fn mass_fixtures() -> Vec<MassFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3A55);
    let mut out = Vec::new();
    for (name, t, d, sel) in [
        ("all-selected", 5, 2, vec![0, 1, 2, 3, 4]),
        ("none-selected", 4, 3, vec![]),
        ("random-subset", 12, 4, vec![0, 3, 4, 7, 11]),
    ] {
        let universe = gauss_mat(&mut rng, t, d, 1.0);
        let q = gauss(&mut rng, d, 1.0);
        let selected: Vec<Vec<f64>> = sel.iter().map(|&i| universe[i].clone()).collect();
        let expected_fraction = oracle_kernel_mass(&q, &selected, &universe, d).unwrap();
        out.push(MassFixture {
            name: name.into(),
            d,
            q,
            universe,
            selected_idx: sel,
            expected_fraction,
        });
    }
    out
}

pub fn two_means_fixtures() -> Vec<TwoMeansFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x2EA5);
    let mut out = Vec::new();
    let blobs = |rng: &mut ChaCha8Rng, n: usize, a: [f64; 2], b: [f64; 2], s: f64| {
        (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { a } else { b };
                vec![
                    c[0] + s * rng.sample::<f64, _>(StandardNormal),
                    c[1] + s * rng.sample::<f64, _>(StandardNormal),
                ]
            })
            .collect::<Vec<_>>()
    };
    for (name, pts) in [
        ("separated-8", blobs(&mut rng, 8, [0.0, 0.0], [5.0, 5.0], 0.2)),
        ("separated-12", blobs(&mut rng, 12, [-3.0, 1.0], [3.0, -1.0], 0.5)),
        ("overlapping-10", blobs(&mut rng, 10, [0.0, 0.0], [1.0, 0.0], 1.0)),
    ] {
        let r = oracle_two_means(&pts).unwrap();
        out.push(TwoMeansFixture {
            name: name.into(),
            points: pts,
            centroids: r.centroids.to_vec(),
            cost: r.cost,
        });
    }
    out
}

pub fn ema_fixtures() -> Vec<EmaFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xE4A);
    let random: Vec<u8> = (0..40).map(|_| rng.random_bool(0.3) as u8).collect();
    [
        ("ones-10", 0.1, 0.0, vec![1u8; 10]),
        ("alternating", 0.25, 0.5, (0..20).map(|i| (i % 2) as u8).collect()),
        ("bernoulli-0.3", 0.05, 0.3, random),
    ]
    .into_iter()
    .map(|(name, eta, c0, u)| EmaFixture {
        name: name.into(),
        eta,
        c0,
        expected: oracle_ema_closed_form(eta, c0, &u),
        u,
    })
    .collect()
}

pub fn accumulate_fixtures() -> Vec<AccumulateFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC);
    let mut out = Vec::new();
    let mut push = |name: &str, fs: u32, fz: u32, features: Vec<Vec<f64>>, values: Vec<Vec<f64>>| {
        let (s_raw, z_raw) = oracle_quantized_accumulate(&features, &values, fs, fz).unwrap();
        let (s_exact, _) = oracle_rational_accumulate(&features, &values).unwrap();
        out.push(AccumulateFixture {
            name: name.into(),
            frac_s: fs,
            frac_z: fz,
            s_raw: s_raw.iter().map(|r| r.iter().map(|&x| x as i64).collect()).collect(),
            z_raw: z_raw.iter().map(|&x| x as i64).collect(),
            s_exact: s_exact
                .iter()
                .map(|r| r.iter().map(rational_to_f64).collect())
                .collect(),
            features,
            values,
        });
    };
    // identity map, m = d = d_v = 1: tokens (2,3), (1,4)
    push(
        "identity-two-tokens",
        8,
        8,
        vec![vec![2.0], vec![1.0]],
        vec![vec![3.0], vec![4.0]],
    );
    let f: Vec<Vec<f64>> = (0..6)
        .map(|_| gauss(&mut rng, 4, 0.3).iter().map(|x| x.exp() / 2.0).collect())
        .collect();
    let v = gauss_mat(&mut rng, 6, 2, 0.5);
    push("random-m4-dv2", 8, 8, f, v);
    let f: Vec<Vec<f64>> = (0..10)
        .map(|_| gauss(&mut rng, 3, 0.2).iter().map(|x| x.exp() / 3f64.sqrt()).collect())
        .collect();
    let v = gauss_mat(&mut rng, 10, 3, 0.4);
    push("random-m3-dv3-asym", 12, 10, f, v);
    out
}

fn rational_to_f64(x: &num_rational::BigRational) -> f64 {
    use num_traits::ToPrimitive;
    x.to_f64().expect("finite")
}

pub fn save<T: Serialize>(name: &str, value: &T) -> std::io::Result<()> {
    let dir = fixture_dir();
    std::fs::create_dir_all(&dir)?;
    let text = serde_json::to_string_pretty(value).expect("serialize") + "\n";
    std::fs::write(dir.join(format!("{name}.json")), text)
}

pub fn load<T: DeserializeOwned>(name: &str) -> T {
    let path = fixture_dir().join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}; run regen-fixtures", path.display()));
    serde_json::from_str(&text).expect("fixture json")
}

pub fn regenerate_all() -> std::io::Result<()> {
    save("attention", &attention_fixtures())?;
    save("scan_match", &scan_fixtures())?;
    save("kernel_mass", &mass_fixtures())?;
    save("two_means", &two_means_fixtures())?;
    save("ema", &ema_fixtures())?;
    save("accumulate", &accumulate_fixtures())?;
    Ok(())
}

pub fn parse_hex(s: &str) -> u128 {
    u128::from_str_radix(s, 16).expect("hex pattern")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_in_sync() {
        assert_eq!(load::<Vec<AttentionFixture>>("attention"), attention_fixtures());
        assert_eq!(load::<Vec<ScanFixture>>("scan_match"), scan_fixtures());
        assert_eq!(load::<Vec<MassFixture>>("kernel_mass"), mass_fixtures());
        assert_eq!(load::<Vec<TwoMeansFixture>>("two_means"), two_means_fixtures());
        assert_eq!(load::<Vec<EmaFixture>>("ema"), ema_fixtures());
        assert_eq!(load::<Vec<AccumulateFixture>>("accumulate"), accumulate_fixtures());
    }

    #[test]
    fn identity_accumulate_fixture_values() {
        let f = &accumulate_fixtures()[0];
        // S = 2*3 + 1*4 = 10 -> 2560 raw at 8 fraction bits; Z = 3 -> 768
        assert_eq!(f.s_raw, vec![vec![2560]]);
        assert_eq!(f.z_raw, vec![768]);
        assert_eq!(f.s_exact, vec![vec![10.0]]);
    }

    #[test]
    fn rational_oracle_is_exact() {
        // recomputing twice gives the identical rational
        let f = &accumulate_fixtures()[1];
        let (a, _) = oracle_rational_accumulate(&f.features, &f.values).unwrap();
        let (b, _) = oracle_rational_accumulate(&f.features, &f.values).unwrap();
        assert_eq!(a, b);
    }
}
