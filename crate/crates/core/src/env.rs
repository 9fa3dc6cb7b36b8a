//! Random environments on the periodized lattice.
//!
//! An environment assigns a conductance to every undirected nearest-neighbour
//! edge of the torus `(Z/LZ)^d`. Storage is one `f64` per edge, axis-major:
//! slot `axis * L^d + index(x)` holds the edge `{x, x + e_axis}`. The edge in
//! direction `-e_axis` at `x` is read from the slot of `x - e_axis`, so the
//! symmetry `w(x,y) = w(y,x)` holds by construction.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce;
use crate::rng::{mix64, Domain, StreamRng};

/// Law of a single conductance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Distribution {
    /// Deterministic value `c`.
    Constant { c: f64 },
    /// `1` with probability `p`, `m` with probability `1 - p`.
    TwoPoint { m: f64, p: f64 },
    /// Uniform on `[1, m]`.
    Uniform { m: f64 },
}

impl Distribution {
    /// Smallest admissible ellipticity ceiling for this law.
    pub fn natural_ceiling(&self) -> f64 {
        match *self {
            Distribution::Constant { c } => c.max(2.0),
            Distribution::TwoPoint { m, .. } | Distribution::Uniform { m } => m,
        }
    }

    /// `E[1/w]^{-1}`, the harmonic mean of the law.
    pub fn inv_mean(&self) -> f64 {
        match *self {
            Distribution::Constant { c } => c,
            Distribution::TwoPoint { m, p } => 1.0 / (p + (1.0 - p) / m),
            Distribution::Uniform { m } => (m - 1.0) / m.ln(),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Distribution::Constant { c } => c,
            Distribution::TwoPoint { m, p } => p + (1.0 - p) * m,
            Distribution::Uniform { m } => 0.5 * (1.0 + m),
        }
    }

    /// Maps a uniform draw on `[0, 1)` to a conductance.
    #[inline]
    pub fn sample(&self, u: f64) -> f64 {
        match *self {
            Distribution::Constant { c } => c,
            Distribution::TwoPoint { m, p } => {
                if u < p {
                    1.0
                } else {
                    m
                }
            }
            Distribution::Uniform { m } => 1.0 + (m - 1.0) * u,
        }
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            Distribution::Constant { .. } => 0,
            Distribution::TwoPoint { .. } => 1,
            Distribution::Uniform { .. } => 2,
        }
    }

    pub(crate) fn params(&self) -> [f64; 2] {
        match *self {
            Distribution::Constant { c } => [c, 0.0],
            Distribution::TwoPoint { m, p } => [m, p],
            Distribution::Uniform { m } => [1.0, m],
        }
    }

    pub(crate) fn from_tag(tag: u8, params: [f64; 2]) -> Result<Self> {
        match tag {
            0 => Ok(Distribution::Constant { c: params[0] }),
            1 => Ok(Distribution::TwoPoint {
                m: params[0],
                p: params[1],
            }),
            2 => Ok(Distribution::Uniform { m: params[1] }),
            t => Err(Error::Format(format!("unknown distribution tag {t}"))),
        }
    }

    pub fn validate(&self, ceiling: f64) -> Result<()> {
        match *self {
            Distribution::Constant { c } => {
                if !(c.is_finite() && (1.0..=ceiling).contains(&c)) {
                    return Err(Error::config(
                        "distribution",
                        format!("constant value {c} outside [1, {ceiling}]"),
                    ));
                }
            }
            Distribution::TwoPoint { m, p } => {
                if !(m.is_finite() && m > 1.0 && m <= ceiling) {
                    return Err(Error::config(
                        "distribution",
                        format!("two-point upper value {m} outside (1, {ceiling}]"),
                    ));
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::config("p", format!("probability {p} outside [0, 1]")));
                }
            }
            Distribution::Uniform { m } => {
                if !(m.is_finite() && m > 1.0 && m <= ceiling) {
                    return Err(Error::config(
                        "distribution",
                        format!("uniform upper end {m} outside (1, {ceiling}]"),
                    ));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Distribution::Constant { c } => write!(f, "constant:{c}"),
            Distribution::TwoPoint { m, p } => write!(f, "twopoint:{m}:{p}"),
            Distribution::Uniform { m } => write!(f, "uniform:{m}"),
        }
    }
}

impl FromStr for Distribution {
    type Err = Error;

    /// Parses `constant:c`, `twopoint:M:p` or `uniform:M`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| Error::config("dist", format!("missing parameter in {s:?}")))?
                .parse::<f64>()
                .map_err(|e| Error::config("dist", format!("{s:?}: {e}")))
        };
        let dist = match (parts[0].to_ascii_lowercase().as_str(), parts.len()) {
            ("constant", 2) => Distribution::Constant { c: num(1)? },
            ("twopoint", 3) => Distribution::TwoPoint {
                m: num(1)?,
                p: num(2)?,
            },
            ("uniform", 2) => Distribution::Uniform { m: num(1)? },
            _ => {
                return Err(Error::config(
                    "dist",
                    format!("{s:?} is not one of constant:c | twopoint:M:p | uniform:M"),
                ))
            }
        };
        Ok(dist)
    }
}

impl From<Distribution> for String {
    fn from(d: Distribution) -> String {
        d.to_string()
    }
}

impl TryFrom<String> for Distribution {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Everything needed to regenerate an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub d: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub distribution: Distribution,
    #[serde(rename = "M")]
    pub m: f64,
    pub seed: u64,
}

impl EnvironmentSpec {
    /// Spec with the distribution's natural ceiling as `M`.
    pub fn new(d: usize, l: usize, distribution: Distribution, seed: u64) -> Self {
        Self {
            d,
            l,
            distribution,
            m: distribution.natural_ceiling(),
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.d) {
            return Err(Error::config("d", format!("dimension {} not in 1..=4", self.d)));
        }
        if self.l < 2 || !self.l.is_multiple_of(2) {
            return Err(Error::config("L", format!("side {} must be even and >= 2", self.l)));
        }
        if self.l > u32::MAX as usize {
            return Err(Error::config("L", "side does not fit in 32 bits"));
        }
        let sites = (self.l as u128).pow(self.d as u32);
        if sites * self.d as u128 > (1u128 << 32) {
            return Err(Error::config("L", format!("{sites} sites is too many")));
        }
        if !(self.m.is_finite() && self.m > 1.0) {
            return Err(Error::config("M", format!("ceiling {} must be > 1", self.m)));
        }
        self.distribution.validate(self.m)
    }

    pub fn n_sites(&self) -> usize {
        self.l.pow(self.d as u32)
    }

    pub fn n_edges(&self) -> usize {
        self.d * self.n_sites()
    }
}

/// A unit lattice direction `±e_axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Direction {
    pub axis: usize,
    pub positive: bool,
}

impl Direction {
    pub fn plus(axis: usize) -> Self {
        Self { axis, positive: true }
    }

    pub fn minus(axis: usize) -> Self {
        Self { axis, positive: false }
    }

    /// Position in the canonical order `+e_0, -e_0, +e_1, -e_1, ...`.
    #[inline]
    pub fn index(&self) -> usize {
        2 * self.axis + usize::from(!self.positive)
    }

    #[inline]
    pub fn from_index(k: usize) -> Self {
        Self {
            axis: k / 2,
            positive: k.is_multiple_of(2),
        }
    }

    pub fn all(d: usize) -> impl Iterator<Item = Direction> {
        (0..2 * d).map(Direction::from_index)
    }

    pub fn reversed(&self) -> Self {
        Self {
            axis: self.axis,
            positive: !self.positive,
        }
    }

    /// `xi . z` for this unit vector `z`.
    #[inline]
    pub fn dot(&self, xi: &[f64]) -> f64 {
        if self.positive {
            xi[self.axis]
        } else {
            -xi[self.axis]
        }
    }

    #[inline]
    pub fn sign(&self) -> i64 {
        if self.positive {
            1
        } else {
            -1
        }
    }
}

/// A torus site. Coordinates live in `[0, L)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Site {
    pub coords: Vec<usize>,
}

impl Site {
    pub fn new(coords: Vec<usize>) -> Self {
        Self { coords }
    }

    pub fn origin(d: usize) -> Self {
        Self { coords: vec![0; d] }
    }
}

/// Index arithmetic on `(Z/LZ)^d`, row-major (last coordinate fastest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Torus {
    pub d: usize,
    pub l: usize,
    pub n_sites: usize,
    strides: Vec<usize>,
}

impl Torus {
    pub fn new(d: usize, l: usize) -> Self {
        let mut strides = vec![1; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * l;
        }
        Self {
            d,
            l,
            n_sites: l.pow(d as u32),
            strides,
        }
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    pub fn index(&self, x: &Site) -> usize {
        x.coords
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| (c % self.l) * s)
            .sum()
    }

    pub fn site(&self, mut index: usize) -> Site {
        let mut coords = vec![0; self.d];
        for (c, &s) in coords.iter_mut().zip(&self.strides) {
            *c = index / s;
            index %= s;
        }
        Site { coords }
    }

    #[inline]
    pub fn coord(&self, index: usize, axis: usize) -> usize {
        (index / self.strides[axis]) % self.l
    }

    /// Index of `x + z`, wrapping.
    #[inline]
    pub fn neighbor(&self, index: usize, z: Direction) -> usize {
        let s = self.strides[z.axis];
        let c = (index / s) % self.l;
        if z.positive {
            if c + 1 == self.l {
                index + s - self.l * s
            } else {
                index + s
            }
        } else if c == 0 {
            index + (self.l - 1) * s
        } else {
            index - s
        }
    }

    /// Index of `x + shift` for an arbitrary integer shift.
    pub fn translate(&self, index: usize, shift: &[i64]) -> usize {
        let l = self.l as i64;
        let mut out = 0;
        for axis in 0..self.d {
            let c = self.coord(index, axis) as i64;
            out += ((c + shift[axis]).rem_euclid(l) as usize) * self.strides[axis];
        }
        out
    }

    /// Neighbour table `[site * 2d + direction index]`.
    pub fn neighbor_table(&self) -> Vec<u32> {
        let k = 2 * self.d;
        let mut table = vec![0u32; self.n_sites * k];
        for x in 0..self.n_sites {
            for z in Direction::all(self.d) {
                table[x * k + z.index()] = self.neighbor(x, z) as u32;
            }
        }
        table
    }
}

/// A real-valued field over torus sites, e.g. a stationary functional
/// evaluated along the orbit `x -> theta_x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldScalar {
    pub values: Vec<f64>,
    pub label: String,
}

impl FieldScalar {
    pub fn new(values: Vec<f64>, label: impl Into<String>) -> Self {
        Self {
            values,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Spatial mean (the torus proxy for an expectation under P).
    pub fn mean(&self) -> f64 {
        reduce::mean(&self.values)
    }

    pub fn mean_square(&self) -> f64 {
        let sq: Vec<f64> = self.values.iter().map(|v| v * v).collect();
        reduce::mean(&sq)
    }

    pub fn spatial_variance(&self) -> f64 {
        let m = self.mean();
        let sq: Vec<f64> = self.values.iter().map(|v| (v - m) * (v - m)).collect();
        reduce::mean(&sq)
    }

    pub fn centered(&self) -> FieldScalar {
        let m = self.mean();
        FieldScalar::new(
            self.values.iter().map(|v| v - m).collect(),
            format!("{} (centered)", self.label),
        )
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Conductances on the torus. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    spec: EnvironmentSpec,
    torus: Torus,
    conductances: Vec<f64>,
}

impl Environment {
    /// Draws `d L^d` i.i.d. conductances. Edge slot `k` uses output `k` of
    /// the environment stream of `spec.seed`, so the result is a pure
    /// function of the spec.
    pub fn generate(spec: &EnvironmentSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.n_edges();
        let dist = spec.distribution;
        let mut rng = StreamRng::new(spec.seed, Domain::Environment, [0, 0]);
        let conductances = (0..n).map(|_| dist.sample(rng.uniform())).collect();
        Ok(Self {
            spec: spec.clone(),
            torus: Torus::new(spec.d, spec.l),
            conductances,
        })
    }

    /// Wraps explicit conductances. Every value must lie in `[1, M]`.
    pub fn from_conductances(spec: &EnvironmentSpec, conductances: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if conductances.len() != spec.n_edges() {
            return Err(Error::config(
                "conductances",
                format!("expected {} values, got {}", spec.n_edges(), conductances.len()),
            ));
        }
        if let Some(bad) = conductances
            .iter()
            .find(|w| !(w.is_finite() && **w >= 1.0 && **w <= spec.m))
        {
            return Err(Error::config(
                "conductances",
                format!("value {bad} outside [1, {}]", spec.m),
            ));
        }
        Ok(Self {
            spec: spec.clone(),
            torus: Torus::new(spec.d, spec.l),
            conductances,
        })
    }

    pub fn spec(&self) -> &EnvironmentSpec {
        &self.spec
    }

    pub fn torus(&self) -> &Torus {
        &self.torus
    }

    pub fn d(&self) -> usize {
        self.spec.d
    }

    pub fn l(&self) -> usize {
        self.spec.l
    }

    pub fn n_sites(&self) -> usize {
        self.torus.n_sites
    }

    /// Raw storage, axis-major then row-major sites.
    pub fn conductances(&self) -> &[f64] {
        &self.conductances
    }

    /// Conductance of the edge `{x, x + e_axis}`.
    #[inline]
    pub fn edge(&self, site: usize, axis: usize) -> f64 {
        self.conductances[axis * self.torus.n_sites + site]
    }

    /// `w(x, x + z)` by site index.
    #[inline]
    pub fn conductance_at(&self, site: usize, z: Direction) -> f64 {
        if z.positive {
            self.edge(site, z.axis)
        } else {
            self.edge(self.torus.neighbor(site, z), z.axis)
        }
    }

    /// `w(x, x + z mod L)`.
    pub fn conductance(&self, x: &Site, z: Direction) -> f64 {
        self.conductance_at(self.torus.index(x), z)
    }

    /// Per-site conductances in canonical direction order, flattened
    /// `[site * 2d + k]`. This is the jump-rate table of the walk.
    pub fn rate_table(&self) -> Vec<f64> {
        let k = 2 * self.d();
        let mut out = vec![0.0; self.n_sites() * k];
        for x in 0..self.n_sites() {
            for z in Direction::all(self.d()) {
                out[x * k + z.index()] = self.conductance_at(x, z);
            }
        }
        out
    }

    /// The environment re-rooted at `x`: `(theta_x w)_{y,z} = w_{x+y, x+z}`.
    pub fn translated(&self, x: &Site) -> Environment {
        let n = self.n_sites();
        let shift: Vec<i64> = x.coords.iter().map(|&c| c as i64).collect();
        let mut conductances = vec![0.0; self.conductances.len()];
        for axis in 0..self.d() {
            for y in 0..n {
                let src = self.torus.translate(y, &shift);
                conductances[axis * n + y] = self.edge(src, axis);
            }
        }
        Environment {
            spec: self.spec.clone(),
            torus: self.torus.clone(),
            conductances,
        }
    }

    /// Local drift `d(theta_x w) = sum_{|z|=1} w(x, x+z) (xi . z)` at every
    /// site.
    pub fn drift_field(&self, xi: &[f64]) -> Result<FieldScalar> {
        check_xi(xi, self.d())?;
        let n = self.n_sites();
        let mut values = vec![0.0; n];
        for (x, v) in values.iter_mut().enumerate() {
            let mut s = 0.0;
            for axis in 0..self.d() {
                let fwd = self.edge(x, axis);
                let bwd = self.conductance_at(x, Direction::minus(axis));
                s += xi[axis] * (fwd - bwd);
            }
            *v = s;
        }
        Ok(FieldScalar::new(values, "drift"))
    }

    /// Stable identity of the environment (spec plus conductance bits).
    pub fn fingerprint(&self) -> u64 {
        let mut h = mix64(self.spec.seed ^ 0x5243_4331);
        h = mix64(h ^ self.spec.d as u64);
        h = mix64(h ^ self.spec.l as u64);
        h = mix64(h ^ self.spec.m.to_bits());
        for w in &self.conductances {
            h = mix64(h ^ w.to_bits());
        }
        h
    }

    pub fn min_conductance(&self) -> f64 {
        self.conductances.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_conductance(&self) -> f64 {
        self.conductances.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Binary layout, little-endian: `"RCC1"`, d (u8), L (u32), M (f64),
    /// distribution tag (u8), two f64 parameters, seed (u64), then the
    /// conductances.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[self.spec.d as u8])?;
        w.write_all(&(self.spec.l as u32).to_le_bytes())?;
        w.write_all(&self.spec.m.to_le_bytes())?;
        w.write_all(&[self.spec.distribution.tag()])?;
        for p in self.spec.distribution.params() {
            w.write_all(&p.to_le_bytes())?;
        }
        w.write_all(&self.spec.seed.to_le_bytes())?;
        let mut buf = Vec::with_capacity(8 * self.conductances.len());
        for c in &self.conductances {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic, expected RCC1".into()));
        }
        let d = read_u8(&mut r)? as usize;
        let l = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let m = f64::from_le_bytes(read_array(&mut r)?);
        let tag = read_u8(&mut r)?;
        let p0 = f64::from_le_bytes(read_array(&mut r)?);
        let p1 = f64::from_le_bytes(read_array(&mut r)?);
        let seed = u64::from_le_bytes(read_array(&mut r)?);
        let spec = EnvironmentSpec {
            d,
            l,
            distribution: Distribution::from_tag(tag, [p0, p1])?,
            m,
            seed,
        };
        spec.validate()?;
        let mut buf = vec![0u8; 8 * spec.n_edges()];
        r.read_exact(&mut buf)?;
        let conductances = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Environment::from_conductances(&spec, conductances)
    }

    /// Writes `<stem>.bin` plus a human-readable `<stem>.json` header.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let file = std::fs::File::create(dir.join(format!("{stem}.bin")))?;
        self.write_binary(std::io::BufWriter::new(file))?;
        let sidecar = EnvironmentSidecar {
            magic: "RCC1".into(),
            spec: self.spec.clone(),
            n_edges: self.conductances.len(),
            layout: "axis-major, then row-major sites; slot (x, i) is edge {x, x+e_i}".into(),
            min: self.min_conductance(),
            max: self.max_conductance(),
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)? + "\n",
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Environment::read_binary(std::io::BufReader::new(file))
    }
}

const MAGIC: &[u8; 4] = b"RCC1";

/// JSON mirror of the binary header.
#[derive(Debug, Serialize, Deserialize)]
pub struct EnvironmentSidecar {
    pub magic: String,
    #[serde(flatten)]
    pub spec: EnvironmentSpec,
    pub n_edges: usize,
    pub layout: String,
    pub min: f64,
    pub max: f64,
}

fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let [b] = read_array::<R, 1>(r)?;
    Ok(b)
}

fn read_array<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub(crate) fn check_xi(xi: &[f64], d: usize) -> Result<()> {
    if xi.len() != d {
        return Err(Error::config(
            "xi",
            format!("direction has {} components, lattice dimension is {d}", xi.len()),
        ));
    }
    if xi.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("xi", "components must be finite"));
    }
    if xi.iter().all(|&v| v == 0.0) {
        return Err(Error::config("xi", "direction must be nonzero"));
    }
    Ok(())
}

/// Unit vector `e_1` in dimension `d`.
pub fn unit_xi(d: usize) -> Vec<f64> {
    let mut xi = vec![0.0; d];
    xi[0] = 1.0;
    xi
}
