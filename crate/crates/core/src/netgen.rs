//! Random network instances and their on-disk dataset format.
//!
//! Transmitters are dropped uniformly in an `a × a` square and every receiver
//! lands uniformly (by area) in an annulus around its transmitter. The first
//! `K · fd_fraction` links form full-duplex device pairs: link `2i` goes from
//! device A to device B and link `2i + 1` goes from B back to A, so each FD
//! link's receiver is its partner's transmitter.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::phy::SelfInterferenceSpec;
use crate::rng::{child_seed, rng_from_seed, Rng};

#[derive(Debug, Error)]
pub enum NetgenError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: inconsistent record: {reason}")]
    Shape { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    UniformOne,
    UniformRandom,
}

/// Simulation parameters. Lengths are meters, powers watts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub num_links: usize,
    pub fd_fraction: f64,
    pub area_side_m: f64,
    pub min_pair_dist_m: f64,
    pub max_pair_dist_m: f64,
    pub eta: f64,
    pub lambda: f64,
    pub antenna_dist_m: f64,
    pub noise_var_w: f64,
    pub p_max_w: f64,
    pub weight_mode: WeightMode,
    pub rng_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            num_links: 50,
            fd_fraction: 0.5,
            area_side_m: 100.0,
            min_pair_dist_m: 2.0,
            max_pair_dist_m: 10.0,
            eta: 0.01,
            lambda: 0.5,
            antenna_dist_m: 0.40,
            noise_var_w: DEFAULT_NOISE_VAR_W,
            p_max_w: 1.0,
            weight_mode: WeightMode::UniformOne,
            rng_seed: 0,
        }
    }
}

/// Receiver noise power used unless configured otherwise. Chosen so that a
/// link at the median pair distance sees an SNR near 20 dB at full power,
/// which puts K = 50 networks in the interference-limited regime.
pub const DEFAULT_NOISE_VAR_W: f64 = 1e-4;

impl ExperimentConfig {
    pub fn with_links(mut self, num_links: usize) -> Self {
        self.num_links = num_links;
        self
    }

    /// FD links actually placed: `K · fd_fraction` rounded down to whole
    /// device pairs, so an odd count leaves its last link half-duplex.
    pub fn num_fd_links(&self) -> usize {
        let fd = (self.num_links as f64 * self.fd_fraction).round() as usize;
        fd - fd % 2
    }

    pub fn si_spec(&self) -> SelfInterferenceSpec {
        SelfInterferenceSpec {
            eta: self.eta,
            lambda: self.lambda,
        }
    }

    pub fn validate(&self) -> Result<(), NetgenError> {
        let bad = |msg: String| Err(NetgenError::InvalidConfig(msg));
        if self.num_links == 0 {
            return bad("num_links must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.fd_fraction) {
            return bad(format!("fd_fraction {} outside [0, 1]", self.fd_fraction));
        }
        let fd = self.num_links as f64 * self.fd_fraction;
        if (fd - fd.round()).abs() > 1e-9 {
            return bad(format!("num_links * fd_fraction = {fd} must be an integer"));
        }
        if !(self.min_pair_dist_m > 0.0 && self.min_pair_dist_m < self.max_pair_dist_m) {
            return bad("need 0 < min_pair_dist_m < max_pair_dist_m".into());
        }
        if self.area_side_m <= self.max_pair_dist_m {
            return bad(format!(
                "area_side_m {} must exceed max_pair_dist_m {}",
                self.area_side_m, self.max_pair_dist_m
            ));
        }
        if !(self.eta >= 0.0) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("need eta >= 0 and lambda in [0, 1]".into());
        }
        if !(self.antenna_dist_m > 0.0) || !(self.noise_var_w > 0.0) || !(self.p_max_w > 0.0) {
            return bad("antenna_dist_m, noise_var_w and p_max_w must be positive".into());
        }
        Ok(())
    }
}

/// One realization of `K` links.
///
/// Matrices are row-major `K × K`; entry `[j][k]` describes the path from
/// transmitter `j` to the receiver of link `k`, so the diagonal holds the
/// direct channels. The path between FD partners is self-interference, which
/// is modelled through [`SelfInterferenceSpec`] instead: its channel entry is
/// zero and its distance is the antenna separation.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInstance {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub tx_pos: Vec<[f64; 2]>,
    pub rx_pos: Vec<[f64; 2]>,
    pub is_fd: Vec<bool>,
    pub fd_partner: Vec<Option<usize>>,
    pub channel: Vec<Complex64>,
    pub dist: Vec<f64>,
    pub weights: Vec<f64>,
    gain: Vec<f64>,
}

impl NetworkInstance {
    /// Assembles an instance from raw parts; distances and gains are derived.
    pub fn from_parts(
        config: ExperimentConfig,
        seed: u64,
        tx_pos: Vec<[f64; 2]>,
        rx_pos: Vec<[f64; 2]>,
        fd_partner: Vec<Option<usize>>,
        channel: Vec<Complex64>,
        weights: Vec<f64>,
    ) -> Self {
        let k = tx_pos.len();
        let is_fd = fd_partner.iter().map(Option::is_some).collect();
        let mut dist = vec![0.0; k * k];
        for j in 0..k {
            for i in 0..k {
                dist[j * k + i] = if fd_partner[i] == Some(j) {
                    config.antenna_dist_m
                } else {
                    euclid(tx_pos[j], rx_pos[i])
                };
            }
        }
        let gain = channel.iter().map(|h| h.norm_sqr()).collect();
        Self {
            config,
            seed,
            tx_pos,
            rx_pos,
            is_fd,
            fd_partner,
            channel,
            dist,
            weights,
            gain,
        }
    }

    pub fn num_links(&self) -> usize {
        self.tx_pos.len()
    }

    /// `|h|²` from transmitter `j` to receiver of link `k`.
    #[inline]
    pub fn gain(&self, j: usize, k: usize) -> f64 {
        self.gain[j * self.num_links() + k]
    }

    pub fn gains(&self) -> &[f64] {
        &self.gain
    }

    #[inline]
    pub fn distance(&self, j: usize, k: usize) -> f64 {
        self.dist[j * self.num_links() + k]
    }

    pub fn channel_at(&self, j: usize, k: usize) -> Complex64 {
        self.channel[j * self.num_links() + k]
    }

    pub fn midpoint(&self, k: usize) -> [f64; 2] {
        [
            0.5 * (self.tx_pos[k][0] + self.rx_pos[k][0]),
            0.5 * (self.tx_pos[k][1] + self.rx_pos[k][1]),
        ]
    }

    /// Relabels links so that new link `i` is old link `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let k = self.num_links();
        assert_eq!(perm.len(), k);
        let mut inverse = vec![0; k];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let mut channel = vec![Complex64::new(0.0, 0.0); k * k];
        for j in 0..k {
            for i in 0..k {
                channel[j * k + i] = self.channel[perm[j] * k + perm[i]];
            }
        }
        Self::from_parts(
            self.config.clone(),
            self.seed,
            perm.iter().map(|&o| self.tx_pos[o]).collect(),
            perm.iter().map(|&o| self.rx_pos[o]).collect(),
            perm.iter()
                .map(|&o| self.fd_partner[o].map(|p| inverse[p]))
                .collect(),
            channel,
            perm.iter().map(|&o| self.weights[o]).collect(),
        )
    }
}

fn euclid(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Draws `h = sqrt(1 / (1 + d²)) · r` with `r ~ CN(0, 1)`.
pub fn sample_channel(d: f64, rng: &mut Rng) -> Complex64 {
    let scale = (1.0 / (1.0 + d * d)).sqrt() * std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(scale * re, scale * im)
}

fn sample_receiver(tx: [f64; 2], cfg: &ExperimentConfig, rng: &mut Rng) -> [f64; 2] {
    let (r1, r2) = (cfg.min_pair_dist_m, cfg.max_pair_dist_m);
    loop {
        let r = rng.gen_range(r1 * r1..r2 * r2).sqrt();
        let theta = rng.gen_range(0.0..2.0 * PI);
        let rx = [tx[0] + r * theta.cos(), tx[1] + r * theta.sin()];
        let inside = |c: f64| (0.0..=cfg.area_side_m).contains(&c);
        if inside(rx[0]) && inside(rx[1]) {
            return rx;
        }
    }
}

pub fn sample_instance(cfg: &ExperimentConfig, seed: u64) -> Result<NetworkInstance, NetgenError> {
    cfg.validate()?;
    let mut rng = rng_from_seed(seed);
    let k = cfg.num_links;
    let num_fd = cfg.num_fd_links();
    let a = cfg.area_side_m;

    let mut tx_pos = Vec::with_capacity(k);
    let mut rx_pos = Vec::with_capacity(k);
    let mut fd_partner = vec![None; k];
    let mut link = 0;
    while link < k {
        let tx = [rng.gen_range(0.0..a), rng.gen_range(0.0..a)];
        let rx = sample_receiver(tx, cfg, &mut rng);
        tx_pos.push(tx);
        rx_pos.push(rx);
        if link < num_fd {
            tx_pos.push(rx);
            rx_pos.push(tx);
            fd_partner[link] = Some(link + 1);
            fd_partner[link + 1] = Some(link);
            link += 2;
        } else {
            link += 1;
        }
    }

    let mut channel = vec![Complex64::new(0.0, 0.0); k * k];
    for j in 0..k {
        for i in 0..k {
            let h = sample_channel(euclid(tx_pos[j], rx_pos[i]), &mut rng);
            if fd_partner[i] != Some(j) {
                channel[j * k + i] = h;
            }
        }
    }

    let weights = match cfg.weight_mode {
        WeightMode::UniformOne => vec![1.0; k],
        WeightMode::UniformRandom => (0..k).map(|_| rng.gen_range(0.0..1.0)).collect(),
    };

    Ok(NetworkInstance::from_parts(
        cfg.clone(),
        seed,
        tx_pos,
        rx_pos,
        fd_partner,
        channel,
        weights,
    ))
}

/// Samples `count` instances; instance `i` uses `child_seed(seed, i)`.
pub fn sample_dataset(
    cfg: &ExperimentConfig,
    seed: u64,
    count: usize,
) -> Result<Vec<NetworkInstance>, NetgenError> {
    use rayon::prelude::*;
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| sample_instance(cfg, child_seed(seed, i as u64)))
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset files: one JSON object per line, floats written with 17
// significant digits.

#[derive(Deserialize)]
#[allow(non_snake_case)]
#[serde(deny_unknown_fields)]
struct Record {
    seed: u64,
    K: usize,
    is_fd: Vec<bool>,
    fd_partner: Vec<Option<usize>>,
    tx_pos: Vec<[f64; 2]>,
    rx_pos: Vec<[f64; 2]>,
    H_re: Vec<Vec<f64>>,
    H_im: Vec<Vec<f64>>,
    weights: Vec<f64>,
    config: ExperimentConfig,
}

fn push_f64(out: &mut String, x: f64) {
    use std::fmt::Write as _;
    write!(out, "{x:.16e}").unwrap();
}

fn push_list<T>(out: &mut String, items: &[T], mut each: impl FnMut(&mut String, &T)) {
    out.push('[');
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        each(out, item);
    }
    out.push(']');
}

/// Serializes one instance as a single line (no trailing newline).
pub fn encode_record(inst: &NetworkInstance) -> String {
    let k = inst.num_links();
    let mut s = String::with_capacity(64 * k * k + 512);
    s.push_str(&format!("{{\"seed\":{},\"K\":{},\"is_fd\":", inst.seed, k));
    push_list(&mut s, &inst.is_fd, |o, b| {
        o.push_str(if *b { "true" } else { "false" })
    });
    s.push_str(",\"fd_partner\":");
    push_list(&mut s, &inst.fd_partner, |o, p| match p {
        Some(p) => o.push_str(&p.to_string()),
        None => o.push_str("null"),
    });
    let point = |o: &mut String, p: &[f64; 2]| {
        o.push('[');
        push_f64(o, p[0]);
        o.push(',');
        push_f64(o, p[1]);
        o.push(']');
    };
    s.push_str(",\"tx_pos\":");
    push_list(&mut s, &inst.tx_pos, point);
    s.push_str(",\"rx_pos\":");
    push_list(&mut s, &inst.rx_pos, point);
    let rows: Vec<usize> = (0..k).collect();
    for (key, part) in [("H_re", 0usize), ("H_im", 1)] {
        s.push_str(&format!(",\"{key}\":"));
        push_list(&mut s, &rows, |o, &j| {
            push_list(o, &inst.channel[j * k..(j + 1) * k], |o, h| {
                push_f64(o, if part == 0 { h.re } else { h.im })
            })
        });
    }
    s.push_str(",\"weights\":");
    push_list(&mut s, &inst.weights, |o, w| push_f64(o, *w));
    s.push_str(",\"config\":");
    s.push_str(&serde_json::to_string(&inst.config).expect("config serializes"));
    s.push('}');
    s
}

/// Parses one line; `line` is the 1-based line number used in errors.
pub fn decode_record(text: &str, line: usize) -> Result<NetworkInstance, DatasetError> {
    let rec: Record =
        serde_json::from_str(text).map_err(|source| DatasetError::Parse { line, source })?;
    let shape = |reason: String| DatasetError::Shape { line, reason };
    let k = rec.K;
    let lens = [
        rec.is_fd.len(),
        rec.fd_partner.len(),
        rec.tx_pos.len(),
        rec.rx_pos.len(),
        rec.H_re.len(),
        rec.H_im.len(),
        rec.weights.len(),
    ];
    if lens.iter().any(|&n| n != k) {
        return Err(shape(format!(
            "expected {k} entries per field, got {lens:?}"
        )));
    }
    if rec.H_re.iter().chain(&rec.H_im).any(|row| row.len() != k) {
        return Err(shape(format!("channel rows must have {k} entries")));
    }
    for (i, p) in rec.fd_partner.iter().enumerate() {
        let ok = match *p {
            Some(p) => p < k && rec.fd_partner[p] == Some(i) && rec.is_fd[i],
            None => !rec.is_fd[i],
        };
        if !ok {
            return Err(shape(format!(
                "fd_partner of link {i} is not a valid involution"
            )));
        }
    }
    let channel = rec
        .H_re
        .iter()
        .zip(&rec.H_im)
        .flat_map(|(re, im)| re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)))
        .collect();
    Ok(NetworkInstance::from_parts(
        rec.config,
        rec.seed,
        rec.tx_pos,
        rec.rx_pos,
        rec.fd_partner,
        channel,
        rec.weights,
    ))
}

pub fn write_dataset(instances: &[NetworkInstance], path: &Path) -> Result<(), DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for inst in instances {
        out.write_all(encode_record(inst).as_bytes()).map_err(io)?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Vec<NetworkInstance>, DatasetError> {
    let io = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_record(&line, i + 1)?);
    }
    Ok(out)
}
