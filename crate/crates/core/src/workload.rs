//! Synthetic traces, CSV ingestion, flow-disjoint splits and scoring metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::clip_norm;

/// Canonical 5-tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FlowKey {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub sport: u16,
    pub dport: u16,
    pub proto: u8,
}

impl FlowKey {
    /// Endpoint-ordered form, so both directions of a flow share an id.
    pub fn canonical(&self) -> FlowKey {
        if (self.src, self.sport) <= (self.dst, self.dport) {
            *self
        } else {
            FlowKey {
                src: self.dst,
                dst: self.src,
                sport: self.dport,
                dport: self.sport,
                proto: self.proto,
            }
        }
    }

    /// Seeded 64-bit id of the canonical tuple.
    pub fn flow_id(&self, seed: u64) -> u64 {
        let c = self.canonical();
        let mut h = Sha256::new();
        h.update(seed.to_le_bytes());
        h.update(c.src.octets());
        h.update(c.dst.octets());
        h.update(c.sport.to_be_bytes());
        h.update(c.dport.to_be_bytes());
        h.update([c.proto]);
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Packet-field bit pattern matched by symbolic rules:
    /// `proto << 32 | sport << 16 | dport`.
    pub fn field_bits(&self) -> u128 {
        ((self.proto as u128) << 32) | ((self.sport as u128) << 16) | self.dport as u128
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Nanoseconds.
    pub ts: u64,
    pub key: FlowKey,
    pub features: Vec<f64>,
    pub value: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub d: usize,
    pub d_v: usize,
    pub packets: Vec<PacketRecord>,
}

impl Trace {
    /// Packet indices per flow id, in trace order.
    pub fn flows(&self, hash_seed: u64) -> BTreeMap<u64, Vec<usize>> {
        let mut out: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, p) in self.packets.iter().enumerate() {
            out.entry(p.key.flow_id(hash_seed)).or_default().push(i);
        }
        out
    }

    pub fn flow_count(&self, hash_seed: u64) -> usize {
        self.packets
            .iter()
            .map(|p| p.key.flow_id(hash_seed))
            .collect::<BTreeSet<_>>()
            .len()
    }

    pub fn subset(&self, keep: impl Fn(&PacketRecord) -> bool) -> Trace {
        Trace {
            d: self.d,
            d_v: self.d_v,
            packets: self.packets.iter().filter(|p| keep(p)).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Drift {
    #[default]
    None,
    /// Feature means move by `drift_shift` along a fixed direction halfway
    /// through the horizon.
    Step,
    /// Class priors follow a sinusoid with one period over the horizon.
    Diurnal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub flows: usize,
    pub packets_min: usize,
    pub packets_max: usize,
    pub d: usize,
    pub d_v: usize,
    pub class_count: usize,
    pub drift: Drift,
    /// Share of flows that carry the hard-rule signature.
    pub hard_rule_fraction: f64,
    pub seed: u64,
    /// Distance between class centers in units of the feature noise.
    pub separation: f64,
    /// Gaussian components per class.
    pub components: usize,
    /// Spread of component centers around their class center.
    pub component_spread: f64,
    pub feature_noise: f64,
    pub value_signal: f64,
    pub value_noise: f64,
    pub drift_shift: f64,
    pub duration_s: f64,
    pub mean_gap_ms: f64,
    /// Probability that a flow uses one of its class's characteristic ports.
    pub port_fidelity: f64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            flows: 2000,
            packets_min: 8,
            packets_max: 32,
            d: 4,
            d_v: 2,
            class_count: 2,
            drift: Drift::Step,
            hard_rule_fraction: 0.05,
            seed: 7,
            separation: 2.5,
            components: 3,
            component_spread: 0.6,
            feature_noise: 0.5,
            value_signal: 0.5,
            value_noise: 1.2,
            drift_shift: 0.6,
            duration_s: 600.0,
            mean_gap_ms: 10.0,
            port_fidelity: 0.6,
        }
    }
}

/// Characteristic destination ports per class; class `c` uses row `c % 4`.
pub const CLASS_PORTS: [[u16; 3]; 4] = [[80, 443, 53], [6667, 4444, 1337], [22, 3389, 5900], [25, 110, 143]];
/// Destination port of flows carrying the hard-rule signature.
pub const SIGNATURE_PORT: u16 = 31337;
pub const SIGNATURE_PROTO: u8 = 6;

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_v == 0 {
            return Err(Error::Config("workload.d and workload.d_v must be positive".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config("workload.class_count must be at least 2".into()));
        }
        if self.packets_min == 0 || self.packets_min > self.packets_max {
            return Err(Error::Config("workload needs 1 <= packets_min <= packets_max".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_rule_fraction) || !(0.0..=1.0).contains(&self.port_fidelity) {
            return Err(Error::Config("workload fractions must lie in [0, 1]".into()));
        }
        if self.components == 0 || !(self.duration_s > 0.0) || !(self.mean_gap_ms > 0.0) {
            return Err(Error::Config(
                "workload components, duration and gap must be positive".into(),
            ));
        }
        Ok(())
    }

    fn class_centers(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let k = self.class_count;
        let scale = self.separation * self.feature_noise / std::f64::consts::SQRT_2;
        let mut centers: Vec<Vec<f64>> = (0..k)
            .map(|c| {
                if k <= self.d {
                    let mut e = vec![0.0; self.d];
                    e[c] = scale;
                    e
                } else {
                    let mut g = gauss(rng, self.d);
                    let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                    g.iter_mut().for_each(|x| *x *= scale / n);
                    g
                }
            })
            .collect();
        let mean: Vec<f64> = (0..self.d)
            .map(|j| centers.iter().map(|c| c[j]).sum::<f64>() / k as f64)
            .collect();
        for c in &mut centers {
            for (x, m) in c.iter_mut().zip(&mean) {
                *x -= m;
            }
        }
        centers
    }

    fn value_code(&self, c: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.d_v];
        if self.class_count == 2 {
            v.iter_mut().for_each(|x| *x = if c == 1 { 1.0 } else { -1.0 });
        } else {
            v[c % self.d_v] = 1.0;
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n * self.value_signal).collect()
    }

    fn class_prior(&self, t_frac: f64) -> Vec<f64> {
        let k = self.class_count;
        let w: Vec<f64> = (0..k)
            .map(|c| match self.drift {
                Drift::Diurnal => {
                    let phase = 2.0 * std::f64::consts::PI * (t_frac + c as f64 / k as f64);
                    1.0 + 0.6 * phase.sin()
                }
                _ => 1.0,
            })
            .collect();
        let s: f64 = w.iter().sum();
        w.iter().map(|x| x / s).collect()
    }
}

/// Draw a trace. Packets are ordered by timestamp, ties by flow then
/// sequence number.
pub fn generate(spec: &WorkloadSpec) -> Result<Trace> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = spec.class_centers(&mut rng);
    let components: Vec<Vec<Vec<f64>>> = centers
        .iter()
        .map(|c| {
            (0..spec.components)
                .map(|_| {
                    let g = gauss(&mut rng, spec.d);
                    c.iter()
                        .zip(g)
                        .map(|(m, z)| m + spec.component_spread * spec.feature_noise * z)
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut shift_dir = gauss(&mut rng, spec.d);
    let n = shift_dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    shift_dir
        .iter_mut()
        .for_each(|x| *x *= spec.drift_shift * spec.feature_noise / n);
    let gap = Exp::new(1.0 / (spec.mean_gap_ms * 1e6)).map_err(|e| Error::Config(e.to_string()))?;
    let horizon_ns = spec.duration_s * 1e9;

    let mut rows: Vec<(u64, usize, usize, PacketRecord)> = Vec::new();
    let mut used = BTreeSet::new();
    for f in 0..spec.flows {
        let start = rng.random::<f64>() * horizon_ns;
        let prior = spec.class_prior(start / horizon_ns);
        let u: f64 = rng.random();
        let mut class = spec.class_count - 1;
        let mut acc = 0.0;
        for (c, p) in prior.iter().enumerate() {
            acc += p;
            if u < acc {
                class = c;
                break;
            }
        }
        let signature = rng.random::<f64>() < spec.hard_rule_fraction;
        // signature flows look benign but are malicious
        let (feature_class, label) = if signature { (0, 1) } else { (class, class) };
        let comp = rng.random_range(0..spec.components);
        let mean = &components[feature_class][comp];
        let code = spec.value_code(feature_class);
        let key = loop {
            let dport = if signature {
                SIGNATURE_PORT
            } else if rng.random::<f64>() < spec.port_fidelity {
                let ports = &CLASS_PORTS[feature_class % CLASS_PORTS.len()];
                ports[rng.random_range(0..ports.len())]
            } else {
                let row = &CLASS_PORTS[rng.random_range(0..CLASS_PORTS.len().min(spec.class_count.max(2)))];
                row[rng.random_range(0..row.len())]
            };
            let proto = if signature {
                SIGNATURE_PROTO
            } else if dport == 53 {
                17
            } else {
                6
            };
            let k = FlowKey {
                src: Ipv4Addr::new(10, rng.random(), rng.random(), rng.random_range(1..255)),
                dst: Ipv4Addr::new(192, 168, rng.random(), rng.random_range(1..255)),
                sport: rng.random_range(1024..=65535),
                dport,
                proto,
            };
            if used.insert(k.canonical()) {
                break k;
            }
        };
        let count = rng.random_range(spec.packets_min..=spec.packets_max);
        let mut t = start;
        for seq in 0..count {
            if seq > 0 {
                t += gap.sample(&mut rng);
            }
            let shifted = spec.drift == Drift::Step && t >= horizon_ns / 2.0;
            let z = gauss(&mut rng, spec.d);
            let features: Vec<f64> = mean
                .iter()
                .zip(&z)
                .enumerate()
                .map(|(j, (m, e))| m + spec.feature_noise * e + if shifted { shift_dir[j] } else { 0.0 })
                .collect();
            let zv = gauss(&mut rng, spec.d_v);
            let value: Vec<f64> = code.iter().zip(&zv).map(|(c, e)| c + spec.value_noise * e).collect();
            rows.push((
                t as u64,
                f,
                seq,
                PacketRecord {
                    ts: t as u64,
                    key,
                    features,
                    value,
                    label,
                },
            ));
        }
    }
    rows.sort_by_key(|r| (r.0, r.1, r.2));
    Ok(Trace {
        d: spec.d,
        d_v: spec.d_v,
        packets: rows.into_iter().map(|r| r.3).collect(),
    })
}

pub fn csv_header(d: usize, d_v: usize) -> Vec<String> {
    let mut h: Vec<String> = ["ts", "flow_src", "flow_dst", "sport", "dport", "proto"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..d).map(|i| format!("f{i}")));
    h.extend((0..d_v).map(|i| format!("v{i}")));
    h.push("label".into());
    h
}

pub fn write_trace<W: Write>(trace: &Trace, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(trace.d, trace.d_v))?;
    for p in &trace.packets {
        let mut rec = vec![
            p.ts.to_string(),
            p.key.src.to_string(),
            p.key.dst.to_string(),
            p.key.sport.to_string(),
            p.key.dport.to_string(),
            p.key.proto.to_string(),
        ];
        rec.extend(p.features.iter().map(|x| format!("{x:.6}")));
        rec.extend(p.value.iter().map(|x| format!("{x:.6}")));
        rec.push(p.label.to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<()> {
    write_trace(trace, std::fs::File::create(path)?)
}

pub fn read_trace<R: Read>(input: R) -> Result<Trace> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let d = header
        .iter()
        .filter(|h| h.starts_with('f') && h[1..].parse::<usize>().is_ok())
        .count();
    let d_v = header
        .iter()
        .filter(|h| h.starts_with('v') && h[1..].parse::<usize>().is_ok())
        .count();
    if header != csv_header(d, d_v) {
        return Err(Error::Parse(format!(
            "trace header must be {}, got {}",
            csv_header(d, d_v).join(","),
            header.join(",")
        )));
    }
    let mut packets = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Parse(format!("trace row {}: bad {what}", line + 2));
        let num = |i: usize| -> Result<f64> { rec[i].trim().parse::<f64>().map_err(|_| bad(&header[i])) };
        let key = FlowKey {
            src: rec[1].trim().parse().map_err(|_| bad("flow_src"))?,
            dst: rec[2].trim().parse().map_err(|_| bad("flow_dst"))?,
            sport: rec[3].trim().parse().map_err(|_| bad("sport"))?,
            dport: rec[4].trim().parse().map_err(|_| bad("dport"))?,
            proto: rec[5].trim().parse().map_err(|_| bad("proto"))?,
        };
        packets.push(PacketRecord {
            ts: rec[0].trim().parse().map_err(|_| bad("ts"))?,
            key,
            features: (6..6 + d).map(num).collect::<Result<_>>()?,
            value: (6 + d..6 + d + d_v).map(num).collect::<Result<_>>()?,
            label: rec[6 + d + d_v].trim().parse().map_err(|_| bad("label"))?,
        });
    }
    Ok(Trace { d, d_v, packets })
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    read_trace(std::fs::File::open(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub clipped_features: usize,
    pub clipped_values: usize,
}

/// Clip feature vectors to radius `r` and value vectors to `r_v`.
pub fn normalize(trace: &mut Trace, r: f64, r_v: f64) -> NormalizationReport {
    let mut rep = NormalizationReport::default();
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    for p in &mut trace.packets {
        if norm(&p.features) > r {
            clip_norm(&mut p.features, r);
            rep.clipped_features += 1;
        }
        if norm(&p.value) > r_v {
            clip_norm(&mut p.value, r_v);
            rep.clipped_values += 1;
        }
    }
    rep
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.75, 0.10, 0.15];

/// Shuffle flow ids under `seed` and cut them into train/validation/test.
pub fn split_by_flow(trace: &Trace, ratios: [f64; 3], seed: u64, hash_seed: u64) -> Result<[Trace; 3]> {
    if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1: {ratios:?}"
        )));
    }
    let mut ids: Vec<u64> = trace.flows(hash_seed).into_keys().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len() as f64;
    let a = (ratios[0] * n).round() as usize;
    let b = ((ratios[0] + ratios[1]) * n).round() as usize;
    let part =
        |lo: usize, hi: usize| -> BTreeSet<u64> { ids[lo.min(ids.len())..hi.min(ids.len())].iter().copied().collect() };
    let sets = [part(0, a), part(a, b), part(b, ids.len())];
    Ok(sets.map(|s| trace.subset(|p| s.contains(&p.key.flow_id(hash_seed)))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub macro_f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Rank AUC of scores for class 1 against the rest, when scores exist.
    pub auc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub n: usize,
}

/// One-vs-rest macro metrics over classes `0..k`.
pub fn score_metrics(pred: &[usize], labels: &[usize], scores: Option<&[f64]>, k: usize) -> Result<MetricsSummary> {
    if pred.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: pred.len(),
        });
    }
    let k = k.max(1);
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &t) in pred.iter().zip(labels) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let f1_den = 2 * tp + fp + fn_;
        per_class.push(ClassMetrics {
            class: c,
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            f1: ratio(2 * tp, f1_den),
            support: tp + fn_,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let auc = match scores {
        Some(s) => {
            if s.len() != labels.len() {
                return Err(Error::DimensionMismatch {
                    expected: labels.len(),
                    got: s.len(),
                });
            }
            let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
            rank_auc(s, &pos)
        }
        None => None,
    };
    Ok(MetricsSummary {
        macro_f1: mean(|m| m.f1),
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        auc,
        per_class,
        n: labels.len(),
    })
}

/// Mann-Whitney AUC with average ranks for ties. `None` without both classes.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&t| positive[t]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Statistic recomputed on `resamples` bootstrap draws of `groups` indices.
pub fn bootstrap<F: FnMut(&[usize]) -> f64>(groups: usize, resamples: usize, seed: u64, mut stat: F) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = vec![0usize; groups];
    (0..resamples)
        .map(|_| {
            draw.iter_mut().for_each(|x| *x = rng.random_range(0..groups.max(1)));
            stat(&draw)
        })
        .collect()
}

/// Linear-interpolated percentile, `p` in `[0, 100]`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[cfg(test)]
mod tests {
    use super::*;
    use nsattn_testkit::{oracle_auc, oracle_macro_f1};

    fn small() -> WorkloadSpec {
        WorkloadSpec {
            flows: 40,
            packets_min: 2,
            packets_max: 6,
            ..WorkloadSpec::default()
        }
    }

    fn to_string(t: &Trace) -> String {
        let mut buf = Vec::new();
        write_trace(t, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_trace_is_header_only() {
        let t = generate(&WorkloadSpec { flows: 0, ..small() }).unwrap();
        assert_eq!(
            to_string(&t),
            "ts,flow_src,flow_dst,sport,dport,proto,f0,f1,f2,f3,v0,v1,label\n"
        );
    }

    #[test]
    fn deterministic_and_round_trips() {
        let a = to_string(&generate(&small()).unwrap());
        let b = to_string(&generate(&small()).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, to_string(&generate(&WorkloadSpec { seed: 8, ..small() }).unwrap()));
        let back = read_trace(a.as_bytes()).unwrap();
        assert_eq!(to_string(&back), a);
        assert_eq!((back.d, back.d_v), (4, 2));
        assert!(back.packets.windows(2).all(|w| w[0].ts <= w[1].ts));
        assert_eq!(back.flow_count(0), 40);
    }

    #[test]
    fn rejects_bad_csv() {
        assert!(read_trace("ts,flow_src\n".as_bytes()).is_err());
        let bad = "ts,flow_src,flow_dst,sport,dport,proto,f0,v0,label\n1,10.0.0.1,x,1,2,6,0.1,0.2,0\n";
        assert!(matches!(read_trace(bad.as_bytes()), Err(Error::Parse(_))));
    }

    #[test]
    fn separated_classes_are_nearest_centroid_separable() {
        let spec = WorkloadSpec {
            flows: 200,
            separation: 6.0,
            components: 1,
            component_spread: 0.0,
            drift: Drift::None,
            hard_rule_fraction: 0.0,
            ..WorkloadSpec::default()
        };
        let t = generate(&spec).unwrap();
        let mut sums = vec![vec![0.0; spec.d]; 2];
        let mut counts = [0usize; 2];
        for p in &t.packets {
            counts[p.label] += 1;
            for (s, x) in sums[p.label].iter_mut().zip(&p.features) {
                *s += x;
            }
        }
        let cents: Vec<Vec<f64>> = sums
            .iter()
            .zip(counts)
            .map(|(s, c)| s.iter().map(|x| x / c as f64).collect())
            .collect();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let pred: Vec<usize> = t
            .packets
            .iter()
            .map(|p| (dist(&p.features, &cents[1]) < dist(&p.features, &cents[0])) as usize)
            .collect();
        let labels: Vec<usize> = t.packets.iter().map(|p| p.label).collect();
        assert!(score_metrics(&pred, &labels, None, 2).unwrap().macro_f1 > 0.99);
    }

    #[test]
    fn signature_flows_use_signature_port() {
        let t = generate(&WorkloadSpec {
            hard_rule_fraction: 1.0,
            ..small()
        })
        .unwrap();
        assert!(t.packets.iter().all(|p| p.key.dport == SIGNATURE_PORT && p.label == 1));
        assert_eq!(t.packets[0].key.field_bits() & 0xff_0000_ffff, 0x06_0000_7a69);
    }

    #[test]
    fn flow_ids_are_canonical() {
        let k = FlowKey {
            src: Ipv4Addr::new(10, 0, 0, 1),
            dst: Ipv4Addr::new(10, 0, 0, 2),
            sport: 5000,
            dport: 80,
            proto: 6,
        };
        let rev = FlowKey {
            src: k.dst,
            dst: k.src,
            sport: k.dport,
            dport: k.sport,
            proto: 6,
        };
        assert_eq!(k.flow_id(3), rev.flow_id(3));
        assert_ne!(k.flow_id(3), k.flow_id(4));
    }

    #[test]
    fn split_proportions_and_disjointness() {
        let t = generate(&WorkloadSpec { flows: 100, ..small() }).unwrap();
        let parts = split_by_flow(&t, DEFAULT_SPLIT, 1, 0).unwrap();
        let sets: Vec<BTreeSet<u64>> = parts.iter().map(|p| p.flows(0).into_keys().collect()).collect();
        assert_eq!(sets.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![75, 10, 15]);
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(sets[i].is_disjoint(&sets[j]));
            }
        }
        assert_eq!(parts.iter().map(|p| p.packets.len()).sum::<usize>(), t.packets.len());

        let one = generate(&WorkloadSpec { flows: 1, ..small() }).unwrap();
        let parts = split_by_flow(&one, DEFAULT_SPLIT, 1, 0).unwrap();
        assert_eq!(parts.iter().filter(|p| !p.packets.is_empty()).count(), 1);
        assert!(split_by_flow(&one, [0.5, 0.5, 0.5], 1, 0).is_err());
    }

    #[test]
    fn normalization_clips() {
        let mut t = generate(&small()).unwrap();
        let rep = normalize(&mut t, 0.5, 0.5);
        assert!(rep.clipped_features > 0 && rep.clipped_values > 0);
        for p in &t.packets {
            assert!(p.features.iter().map(|x| x * x).sum::<f64>().sqrt() <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn metric_examples() {
        let labels = [0, 1, 1, 0, 1];
        let m = score_metrics(&labels, &labels, Some(&[0.1, 0.9, 0.8, 0.2, 0.7]), 2).unwrap();
        assert_eq!((m.macro_f1, m.precision, m.recall, m.auc), (1.0, 1.0, 1.0, Some(1.0)));

        let pred = [0, 0, 1, 1, 1, 0];
        let truth = [0, 0, 0, 1, 1, 1];
        // class 0: tp 2 fp 1 fn 1 -> 2/3; class 1 likewise
        let m = score_metrics(&pred, &truth, None, 2).unwrap();
        assert!((m.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.macro_f1, oracle_macro_f1(&pred, &truth, 2));

        for k in [2usize, 3] {
            let truth: Vec<usize> = (0..30).map(|i| i % k).collect();
            let m = score_metrics(&vec![0; 30], &truth, None, k).unwrap();
            assert!((m.macro_f1 - (2.0 / (k as f64 + 1.0)) / k as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn auc_of_random_scores_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pos: Vec<bool> = (0..10_000).map(|i| i % 2 == 0).collect();
        let s: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let auc = rank_auc(&s, &pos).unwrap();
        assert!((auc - 0.5).abs() < 0.03);
        let s: Vec<f64> = (0..200).map(|i| ((i * 7) % 13) as f64).collect();
        let pos: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
        assert!((rank_auc(&s, &pos).unwrap() - oracle_auc(&s, &pos)).abs() < 1e-12);
        assert_eq!(rank_auc(&[0.1], &[true]), None);
    }

    #[test]
    fn bootstrap_and_percentiles() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_eq!(percentile(&[0.0, 10.0], 25.0), 2.5);
        let v = bootstrap(10, 50, 1, |d| d.len() as f64);
        assert!(v.iter().all(|&x| x == 10.0));
        assert_eq!(
            bootstrap(10, 5, 2, |d| d[0] as f64),
            bootstrap(10, 5, 2, |d| d[0] as f64)
        );
    }
}
