//! Spin operators, lattice geometry and the NV ground-state Hamiltonian.
//!
//! The product space is always ordered electron (S = 1), nitrogen (I = 1), then
//! the nearest-shell carbons (I = 1/2 each) in site order. Basis index `b` of a
//! space with `n` carbons therefore decomposes as
//! `b = ((ms_idx * 3) + mi_idx) * 2^n + carbon_bits`, where index 0 is the
//! largest projection (+1, +1, up).

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constants::{PhysicalConstants, CARBON_SITE_ROTATION};
use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

pub const MAX_CARBONS: usize = 3;
pub const ORIENTATIONS: usize = 4;

#[derive(Debug, Clone)]
pub struct SpinOperators {
    pub s: f64,
    pub sx: CMatrix,
    pub sy: CMatrix,
    pub sz: CMatrix,
}

impl SpinOperators {
    pub fn dim(&self) -> usize {
        self.sz.nrows()
    }

    pub fn components(&self) -> [&CMatrix; 3] {
        [&self.sx, &self.sy, &self.sz]
    }
}

/// Angular-momentum matrices in the |s, m> basis ordered m = s, s-1, ..., -s.
pub fn build_spin_operators(s: f64) -> Result<SpinOperators> {
    let twice = (2.0 * s).round();
    if !s.is_finite() || (2.0 * s - twice).abs() > 1e-12 || !(twice == 1.0 || twice == 2.0) {
        return Err(Error::UnsupportedSpin(s));
    }
    let dim = twice as usize + 1;
    let m = |i: usize| s - i as f64;

    let mut sz = CMatrix::zeros(dim, dim);
    // S+ |m> = sqrt(s(s+1) - m(m+1)) |m+1>
    let mut sp = CMatrix::zeros(dim, dim);
    for i in 0..dim {
        sz[(i, i)] = Complex64::new(m(i), 0.0);
        if i + 1 < dim {
            let mm = m(i + 1);
            sp[(i, i + 1)] = Complex64::new((s * (s + 1.0) - mm * (mm + 1.0)).sqrt(), 0.0);
        }
    }
    let sm = sp.adjoint();
    let sx = (&sp + &sm) * Complex64::new(0.5, 0.0);
    let sy = (&sp - &sm) * Complex64::new(0.0, -0.5);
    Ok(SpinOperators { s, sx, sy, sz })
}

fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn site_rotation(site: usize) -> Matrix3<f64> {
    let r = CARBON_SITE_ROTATION;
    let mut base =
        Matrix3::new(r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]);
    // the tabulated entries carry 4 digits; renormalize rows so the map is a rotation
    for mut row in base.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    rot_z(site as f64 * 2.0 * std::f64::consts::PI / 3.0) * base
}

/// Hyperfine tensor (MHz) of a nearest-shell 13C at `site` in the NV frame.
///
/// Sites are related by the C3 symmetry of the vacancy: site `k` is the first
/// site rotated by `k * 120` degrees about the NV axis.
pub fn carbon_site_tensor(site: usize, constants: &PhysicalConstants) -> Result<Matrix3<f64>> {
    if site >= MAX_CARBONS {
        return Err(Error::IndexOutOfRange { what: "carbon site", index: site, max: MAX_CARBONS - 1 });
    }
    let a = Matrix3::from_diagonal(&Vector3::from(constants.a13c));
    let r = site_rotation(site);
    Ok(r * a * r.transpose())
}

/// Orthonormal frame (x, y, z) of NV orientation `k` in crystal coordinates.
///
/// Orientation 0 has z along [111]; the others are images of that frame under
/// the twofold rotations about the cubic axes, so z runs along [-1-11], [-11-1]
/// and [1-1-1] respectively.
pub fn nv_frame(orientation: usize) -> Result<[Vector3<f64>; 3]> {
    let flip = match orientation {
        0 => Vector3::new(1.0, 1.0, 1.0),
        1 => Vector3::new(-1.0, -1.0, 1.0),
        2 => Vector3::new(-1.0, 1.0, -1.0),
        3 => Vector3::new(1.0, -1.0, -1.0),
        _ => {
            return Err(Error::IndexOutOfRange {
                what: "NV orientation",
                index: orientation,
                max: ORIENTATIONS - 1,
            })
        }
    };
    let x0 = Vector3::new(1.0, 1.0, -2.0) / 6f64.sqrt();
    let y0 = Vector3::new(-1.0, 1.0, 0.0) / 2f64.sqrt();
    let z0 = Vector3::new(1.0, 1.0, 1.0) / 3f64.sqrt();
    Ok([x0.component_mul(&flip), y0.component_mul(&flip), z0.component_mul(&flip)])
}

/// Express a crystal-frame vector in the local frame of NV orientation `orientation`.
pub fn field_in_nv_frame(b_lab: Vector3<f64>, orientation: usize) -> Result<Vector3<f64>> {
    let [x, y, z] = nv_frame(orientation)?;
    Ok(Vector3::new(x.dot(&b_lab), y.dot(&b_lab), z.dot(&b_lab)))
}

/// Crystal-frame vector from spherical angles measured in the orientation-0 frame.
pub fn lab_vector(magnitude: f64, theta: f64, phi: f64) -> Vector3<f64> {
    let [x, y, z] = nv_frame(0).expect("orientation 0 exists");
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    (x * (st * cp) + y * (st * sp) + z * ct) * magnitude
}

/// Full parameterization of one NV-13C isotopologue in a static field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinSystemConfig {
    /// Field magnitude (G).
    pub b_mag: f64,
    /// Zenith angle of B from the [111] axis (rad).
    pub theta: f64,
    /// Azimuth of B about the [111] axis (rad).
    pub phi: f64,
    /// Transverse strain components (MHz).
    pub ex: f64,
    pub ey: f64,
    /// Zero-field splitting including longitudinal strain (MHz).
    pub d_prime: f64,
    /// Number of nearest-shell 13C nuclei.
    pub n13c: usize,
    /// Microwave polarization angles (rad), crystal frame.
    pub xi: f64,
    pub zeta: f64,
    pub orientation: usize,
}

impl Default for SpinSystemConfig {
    fn default() -> Self {
        Self {
            b_mag: 0.0,
            theta: 0.0,
            phi: 0.0,
            ex: 0.0,
            ey: 0.0,
            d_prime: 2870.0,
            n13c: 0,
            xi: std::f64::consts::FRAC_PI_2,
            zeta: 0.0,
            orientation: 0,
        }
    }
}

impl SpinSystemConfig {
    pub fn dim(&self) -> usize {
        hilbert_dim(self.n13c)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("b_mag", self.b_mag),
            ("theta", self.theta),
            ("phi", self.phi),
            ("ex", self.ex),
            ("ey", self.ey),
            ("d_prime", self.d_prime),
            ("xi", self.xi),
            ("zeta", self.zeta),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        if self.b_mag < 0.0 {
            return Err(crate::error::invalid("b_mag", "field magnitude must be >= 0"));
        }
        if self.n13c > MAX_CARBONS {
            return Err(Error::IndexOutOfRange { what: "n13c", index: self.n13c, max: MAX_CARBONS });
        }
        if self.orientation >= ORIENTATIONS {
            return Err(Error::IndexOutOfRange {
                what: "NV orientation",
                index: self.orientation,
                max: ORIENTATIONS - 1,
            });
        }
        Ok(())
    }

    pub fn field_lab(&self) -> Vector3<f64> {
        lab_vector(self.b_mag, self.theta, self.phi)
    }

    pub fn field_nv(&self) -> Result<Vector3<f64>> {
        field_in_nv_frame(self.field_lab(), self.orientation)
    }

    /// Unit microwave polarization in the NV frame of this config's orientation.
    pub fn mw_direction_nv(&self) -> Result<Vector3<f64>> {
        field_in_nv_frame(mw_direction_lab(self.xi, self.zeta), self.orientation)
    }
}

/// Unit polarization vector from the angles (xi from z, zeta about z).
pub fn mw_direction_lab(xi: f64, zeta: f64) -> Vector3<f64> {
    let (sx, cx) = xi.sin_cos();
    let (sz, cz) = zeta.sin_cos();
    Vector3::new(sx * cz, sx * sz, cx)
}

pub fn hilbert_dim(n13c: usize) -> usize {
    9 << n13c
}

fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

/// Kronecker product of a list of factors.
pub fn kron_all(factors: &[&CMatrix]) -> CMatrix {
    let mut out = CMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
    for f in factors {
        out = out.kronecker(*f);
    }
    out
}

/// Operator bookkeeping for the S (x) I_N (x) I_C^(x n) product space.
#[derive(Debug, Clone)]
pub struct SpinSpace {
    pub n13c: usize,
    pub electron: SpinOperators,
    pub nitrogen: SpinOperators,
    pub carbon: SpinOperators,
}

impl SpinSpace {
    pub fn new(n13c: usize) -> Result<Self> {
        if n13c > MAX_CARBONS {
            return Err(Error::IndexOutOfRange { what: "n13c", index: n13c, max: MAX_CARBONS });
        }
        Ok(Self {
            n13c,
            electron: build_spin_operators(1.0)?,
            nitrogen: build_spin_operators(1.0)?,
            carbon: build_spin_operators(0.5)?,
        })
    }

    pub fn dim(&self) -> usize {
        hilbert_dim(self.n13c)
    }

    fn carbon_factors(&self, slot: Option<(usize, &CMatrix)>) -> Vec<CMatrix> {
        (0..self.n13c)
            .map(|k| match slot {
                Some((s, op)) if s == k => op.clone(),
                _ => identity(2),
            })
            .collect()
    }

    fn product(&self, e: &CMatrix, n: &CMatrix, slot: Option<(usize, &CMatrix)>) -> CMatrix {
        let carbons = self.carbon_factors(slot);
        let mut refs: Vec<&CMatrix> = vec![e, n];
        refs.extend(carbons.iter());
        kron_all(&refs)
    }

    /// Electron operator padded with identities.
    pub fn on_electron(&self, op: &CMatrix) -> CMatrix {
        self.product(op, &identity(3), None)
    }

    pub fn on_nitrogen(&self, op: &CMatrix) -> CMatrix {
        self.product(&identity(3), op, None)
    }

    pub fn electron_nitrogen(&self, e: &CMatrix, n: &CMatrix) -> CMatrix {
        self.product(e, n, None)
    }

    pub fn electron_carbon(&self, e: &CMatrix, slot: usize, c: &CMatrix) -> CMatrix {
        self.product(e, &identity(3), Some((slot, c)))
    }

    /// Quantum numbers of basis state `index`: (m_s, m_I, carbon projections as +1/-1 for up/down).
    pub fn basis_label(&self, index: usize) -> BasisLabel {
        let carbons = 1usize << self.n13c;
        let bits = index % carbons;
        let rest = index / carbons;
        BasisLabel {
            ms: 1 - (rest / 3) as i8,
            mi: 1 - (rest % 3) as i8,
            carbons: (0..self.n13c)
                .map(|k| if bits >> (self.n13c - 1 - k) & 1 == 0 { 1 } else { -1 })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasisLabel {
    pub ms: i8,
    pub mi: i8,
    /// +1 for spin up, -1 for spin down, one per carbon slot.
    pub carbons: Vec<i8>,
}

/// Precomputed operator pieces of the ground-state Hamiltonian for one carbon
/// site assignment. The field- and strain-dependent parts are scaled at assembly
/// time, so repeated evaluation (fits, field sweeps) only costs a few matrix sums.
#[derive(Debug, Clone)]
pub struct HamiltonianTerms {
    space: SpinSpace,
    sites: Vec<usize>,
    sz2: CMatrix,
    electron: [CMatrix; 3],
    nitrogen: [CMatrix; 3],
    strain_x: CMatrix,
    strain_y: CMatrix,
    gamma_e: f64,
    gamma_n: f64,
    /// Quadrupole plus all hyperfine terms; field independent.
    fixed: CMatrix,
}

impl HamiltonianTerms {
    /// Terms with carbons on sites `0..n13c`.
    pub fn new(n13c: usize, constants: &PhysicalConstants) -> Result<Self> {
        let sites: Vec<usize> = (0..n13c).collect();
        Self::on_sites(&sites, constants)
    }

    /// Terms with one carbon on each listed site; slot order follows `sites`.
    pub fn on_sites(sites: &[usize], constants: &PhysicalConstants) -> Result<Self> {
        let space = SpinSpace::new(sites.len())?;
        let mut seen = [false; MAX_CARBONS];
        for &s in sites {
            if s >= MAX_CARBONS {
                return Err(Error::IndexOutOfRange { what: "carbon site", index: s, max: MAX_CARBONS - 1 });
            }
            if seen[s] {
                return Err(crate::error::invalid("sites", format!("site {s} listed twice")));
            }
            seen[s] = true;
        }

        let s = &space.electron;
        let i = &space.nitrogen;
        let c = &space.carbon;
        let sz2 = &s.sz * &s.sz;
        let electron = [space.on_electron(&s.sx), space.on_electron(&s.sy), space.on_electron(&s.sz)];
        let nitrogen = [space.on_nitrogen(&i.sx), space.on_nitrogen(&i.sy), space.on_nitrogen(&i.sz)];
        let strain_x = space.on_electron(&(&s.sy * &s.sy - &s.sx * &s.sx));
        let strain_y = space.on_electron(&(&s.sx * &s.sy + &s.sy * &s.sx));

        let dim = space.dim();
        let mut fixed = CMatrix::zeros(dim, dim);
        let re = |v: f64| Complex64::new(v, 0.0);
        fixed += space.on_nitrogen(&(&i.sz * &i.sz)) * re(constants.quadrupole);
        fixed += space.electron_nitrogen(&s.sz, &i.sz) * re(constants.a_n_par);
        fixed += (space.electron_nitrogen(&s.sx, &i.sx) + space.electron_nitrogen(&s.sy, &i.sy))
            * re(constants.a_n_perp);
        for (slot, &site) in sites.iter().enumerate() {
            let tensor = carbon_site_tensor(site, constants)?;
            for (a, se) in s.components().into_iter().enumerate() {
                for (b, ic) in c.components().into_iter().enumerate() {
                    let coeff = tensor[(a, b)];
                    if coeff != 0.0 {
                        fixed += space.electron_carbon(se, slot, ic) * re(coeff);
                    }
                }
            }
        }

        Ok(Self {
            sz2: space.on_electron(&sz2),
            space,
            sites: sites.to_vec(),
            electron,
            nitrogen,
            strain_x,
            strain_y,
            gamma_e: constants.gamma_e,
            gamma_n: constants.gamma_n,
            fixed,
        })
    }

    pub fn space(&self) -> &SpinSpace {
        &self.space
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn dim(&self) -> usize {
        self.space.dim()
    }

    /// Electron S_z embedded in the full space.
    pub fn electron_sz(&self) -> &CMatrix {
        &self.electron[2]
    }

    /// Assemble H for an NV-frame field vector (G). The field may point anywhere,
    /// which lets finite-difference code step through zero.
    pub fn assemble_nv(&self, d_prime: f64, ex: f64, ey: f64, b_nv: &Vector3<f64>) -> CMatrix {
        let mut h = self.fixed.clone();
        let mut axpy = |m: &CMatrix, a: f64| {
            if a != 0.0 {
                h.zip_apply(m, |x, y| *x += y * a);
            }
        };
        axpy(&self.sz2, d_prime);
        axpy(&self.strain_x, ex);
        axpy(&self.strain_y, ey);
        for k in 0..3 {
            axpy(&self.electron[k], self.gamma_e * b_nv[k]);
            axpy(&self.nitrogen[k], -self.gamma_n * b_nv[k]);
        }
        h
    }

    pub fn assemble(&self, cfg: &SpinSystemConfig) -> Result<CMatrix> {
        cfg.validate()?;
        if cfg.n13c != self.space.n13c {
            return Err(Error::DimensionMismatch { expected: self.dim(), actual: cfg.dim() });
        }
        Ok(self.assemble_nv(cfg.d_prime, cfg.ex, cfg.ey, &cfg.field_nv()?))
    }
}

/// Ground-state Hamiltonian (MHz) of `cfg`, carbons on sites `0..n13c`.
pub fn assemble_hamiltonian(cfg: &SpinSystemConfig, constants: &PhysicalConstants) -> Result<CMatrix> {
    cfg.validate()?;
    HamiltonianTerms::new(cfg.n13c, constants)?.assemble(cfg)
}

/// Frobenius norm of H - H^dagger.
pub fn hermitian_deviation(h: &CMatrix) -> f64 {
    (h - h.adjoint()).norm()
}
