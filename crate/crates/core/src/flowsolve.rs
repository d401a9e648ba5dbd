//! Ground-truth velocity fields on masked Cartesian grids.
//!
//! Two solvers share the canvas. Duct mode treats the mask as a closed
//! cross-section carrying fully developed axial flow and solves the Poisson
//! problem -mu lap(w) = G with conjugate gradients. Channel mode marches the
//! incompressible momentum equations to steady state on a staggered grid with
//! explicit upwind advection, explicit diffusion, and a pressure projection
//! each pseudo-time step.

use crate::geometry::RasterMask;
use crate::TargetMode;

use std::io::Write as IoWrite;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMode {
    Duct,
    Channel,
}

#[derive(Clone, Copy, Debug)]
pub struct SolverConfig {
    pub mode: SolveMode,
    /// Fluid density, kg/m^3.
    pub density: f64,
    /// Dynamic viscosity, Pa s.
    pub viscosity: f64,
    /// Mean (duct) or inlet (channel) velocity, m/s.
    pub mean_velocity: f64,
    /// Physical size of one pixel, m.
    pub pixel_pitch: f64,
    /// Relative convergence tolerance.
    pub tolerance: f64,
    /// Iteration cap: CG iterations in duct mode, pseudo-time steps in
    /// channel mode.
    pub max_iterations: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mode: SolveMode::Duct,
            density: 998.0,
            viscosity: 1.0e-3,
            mean_velocity: 0.05,
            pixel_pitch: 1.0e-6,
            tolerance: 1.0e-6,
            max_iterations: 200_000,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolveError> {
        if !(self.density > 0.0
            && self.viscosity > 0.0
            && self.mean_velocity > 0.0
            && self.pixel_pitch > 0.0)
        {
            return Err(SolveError::InvalidConfig(
                "density, viscosity, velocity, and pitch must be positive".into(),
            ));
        }
        if !(self.tolerance > 0.0 && self.tolerance <= 1.0e-2) {
            return Err(SolveError::InvalidConfig("tolerance must lie in (0, 1e-2]".into()));
        }
        if self.max_iterations == 0 {
            return Err(SolveError::InvalidConfig("iteration cap must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SolveError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("mask has no fluid pixels")]
    EmptyFluid,
    #[error("solver stopped after {iterations} iterations at relative residual {residual:.3e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("no fluid path connects the inlet column to the outlet column")]
    NoThroughPath,
    #[error("field became non-finite at step {step}")]
    UnstableTimestep { step: usize },
    #[error("field is {fh}x{fw} but mask is {mh}x{mw}")]
    ShapeMismatch { fh: usize, fw: usize, mh: usize, mw: usize },
    #[error("field has no {0} channel")]
    MissingChannel(&'static str),
}

/// Staggered face velocities kept alongside the collocated field so reports
/// can evaluate the exact divergence the projection enforced. u lives on
/// vertical faces, h rows by w+1 columns; v on horizontal faces, h+1 rows by
/// w columns.
#[derive(Clone, Debug)]
pub struct StaggeredField {
    pub u_faces: Vec<f64>,
    pub v_faces: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub mode: SolveMode,
    /// x-velocity at pixel centers, m/s. Zero on non-fluid pixels.
    pub u: Vec<f64>,
    /// y-velocity (increasing row index) at pixel centers, m/s.
    pub v: Vec<f64>,
    /// Speed at pixel centers: sqrt(u^2+v^2) in channel mode, the axial
    /// velocity in duct mode.
    pub magnitude: Vec<f64>,
    /// Projection pressure at the final step, Pa. Channel mode only.
    pub pressure: Option<Vec<f64>>,
    /// Duct: final CG relative residual. Channel: last normalized per-step
    /// velocity change.
    pub converged_residual: f64,
    /// Duct: CG iterations. Channel: pseudo-time steps taken.
    pub iterations: usize,
    pub staggered: Option<StaggeredField>,
}

impl FlowField {
    /// Zero field over an h-by-w canvas, useful for hand-built tests.
    pub fn zeros(h: usize, w: usize, mode: SolveMode) -> Self {
        FlowField {
            h,
            w,
            mode,
            u: vec![0.0; h * w],
            v: vec![0.0; h * w],
            magnitude: vec![0.0; h * w],
            pressure: None,
            converged_residual: 0.0,
            iterations: 0,
            staggered: None,
        }
    }

    /// Volumetric flux (per unit depth) through face column `j`, 0..=w.
    /// Requires the staggered faces.
    pub fn column_flux(&self, j: usize, cfg: &SolverConfig) -> Option<f64> {
        let st = self.staggered.as_ref()?;
        if j > self.w {
            return None;
        }
        let mut q = 0.0;
        for i in 0..self.h {
            q += st.u_faces[i * (self.w + 1) + j];
        }
        Some(q * cfg.pixel_pitch)
    }
}

// ---------------------------------------------------------------------------
// Preconditioned conjugate gradients for the 5-point Poisson systems.
//
// Both solvers assemble the same shape of matrix: positive diagonal, -1 links
// to up to four neighbors (an M-matrix), scaled by 1/dx^2. Incomplete
// Cholesky with zero fill is well defined on such matrices and cuts the
// iteration count several-fold; the constant 1/dx^2 cancels inside PCG, so
// the factorization works on the unscaled stencil.

/// Zero-fill modified incomplete Cholesky factors of a 5-point stencil,
/// stored as reciprocal pivots plus padded lower/upper neighbor slots so the
/// triangular sweeps run without branches or divisions. Slot `n` in the
/// scratch vectors is a permanent zero standing in for absent neighbors.
struct Ic0 {
    inv_d: Vec<f64>,
    low: Vec<[u32; 2]>,
    up: Vec<[u32; 2]>,
}

impl Ic0 {
    /// `links` holds neighbor slots with usize::MAX for absent sides; slots
    /// below `s` form the lower triangle because cells are compacted in
    /// row-major order. `theta` lumps the dropped fill onto the pivot
    /// (relaxed below 1 so weakly coupled rows keep positive pivots).
    fn build(diag: &[f64], links: &[[usize; 4]], theta: f64) -> Ic0 {
        let n = diag.len();
        let pad = n as u32;
        let mut inv_d = vec![0.0f64; n];
        let mut low = vec![[pad; 2]; n];
        let mut up = vec![[pad; 2]; n];
        for s in 0..n {
            let (mut li, mut ui) = (0, 0);
            for &t in &links[s] {
                if t == usize::MAX {
                    continue;
                }
                if t < s {
                    low[s][li] = t as u32;
                    li += 1;
                } else {
                    up[s][ui] = t as u32;
                    ui += 1;
                }
            }
            let mut acc = diag[s];
            for k in 0..li {
                let t = low[s][k] as usize;
                // Eliminating t would couple its two upper neighbors; the
                // dropped entry is folded into this pivot instead.
                let both = up[t][0] != pad && up[t][1] != pad;
                let fill = if both { theta } else { 0.0 };
                acc -= inv_d[t] * (1.0 + fill);
            }
            inv_d[s] = 1.0 / acc.max(1.0e-2);
        }
        Ic0 { inv_d, low, up }
    }

    /// z = M^-1 r for M = (D+L) D^-1 (D+L)^T, returning r·z fused into the
    /// backward sweep. `y` and `z` have length n+1 with the pad slot kept at
    /// zero.
    fn apply_dot(&self, r: &[f64], y: &mut [f64], z: &mut [f64]) -> f64 {
        let n = self.inv_d.len();
        for s in 0..n {
            let l = self.low[s];
            y[s] = (r[s] + y[l[0] as usize] + y[l[1] as usize]) * self.inv_d[s];
        }
        let mut rz = 0.0;
        for s in (0..n).rev() {
            let u = self.up[s];
            let zv = y[s] + (z[u[0] as usize] + z[u[1] as usize]) * self.inv_d[s];
            z[s] = zv;
            rz += zv * r[s];
        }
        rz
    }
}

/// Reusable work vectors for pcg_solve, hoisted out of the step loop.
struct PcgScratch {
    r: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    ap: Vec<f64>,
}

impl PcgScratch {
    fn new(n: usize) -> PcgScratch {
        PcgScratch {
            r: vec![0.0; n],
            y: vec![0.0; n + 1],
            z: vec![0.0; n + 1],
            p: vec![0.0; n],
            ap: vec![0.0; n],
        }
    }
}


/// Solves A x = b for SPD A given as x -> Ax, preconditioned by the IC(0)
/// factors. Returns (iterations, relative residual). x holds the initial
/// guess on entry and the solution on exit.
fn pcg_solve(
    stencil: &[[u32; 4]],
    sdiag: &[f64],
    scale: f64,
    pre: &Ic0,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iters: usize,
    scr: &mut PcgScratch,
) -> (usize, f64) {
    let n = b.len();
    let apply_at = |xv: &[f64], s: usize| -> f64 {
        let st = &stencil[s];
        (sdiag[s] * xv[s]
            - xv[st[0] as usize]
            - xv[st[1] as usize]
            - xv[st[2] as usize]
            - xv[st[3] as usize])
            * scale
    };
    let mut bb = 0.0;
    for k in 0..n {
        bb += b[k] * b[k];
    }
    let b_norm = bb.sqrt();
    if b_norm == 0.0 {
        x.fill(0.0);
        return (0, 0.0);
    }
    let (r, y, z, p, ap) =
        (&mut scr.r[..n], &mut scr.y[..], &mut scr.z[..], &mut scr.p[..n], &mut scr.ap[..n]);
    let mut rr = 0.0;
    for s in 0..n {
        let v = b[s] - apply_at(x, s);
        r[s] = v;
        rr += v * v;
    }
    let mut res = rr.sqrt() / b_norm;
    if res <= rel_tol {
        return (0, res);
    }
    let mut rz = pre.apply_dot(r, y, z);
    p.copy_from_slice(&z[..n]);
    for it in 1..=max_iters {
        let mut pap = 0.0;
        for s in 0..n {
            let v = apply_at(p, s);
            ap[s] = v;
            pap += p[s] * v;
        }
        if pap <= 0.0 {
            return (it, res);
        }
        let alpha = rz / pap;
        let mut rr_new = 0.0;
        for k in 0..n {
            x[k] += alpha * p[k];
            let rv = r[k] - alpha * ap[k];
            r[k] = rv;
            rr_new += rv * rv;
        }
        res = rr_new.sqrt() / b_norm;
        if res <= rel_tol {
            return (it, res);
        }
        let rz_new = pre.apply_dot(r, y, z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    (max_iters, res)
}

// ---------------------------------------------------------------------------
// Duct mode.

/// Fully developed axial flow: -mu lap(w) = G on fluid pixels with w = 0 at
/// non-fluid neighbors, solved for G = 1 and rescaled so the fluid-mean of w
/// equals the configured mean velocity (legitimate because the problem is
/// linear in G).
pub fn solve_duct(mask: &RasterMask, cfg: &SolverConfig) -> Result<FlowField, SolveError> {
    cfg.validate()?;
    let (h, w) = (mask.h, mask.w);
    // Anti-diagonal wavefront numbering; see ChannelGrid::build.
    let mut cells: Vec<usize> = Vec::new();
    let mut slot = vec![usize::MAX; h * w];
    for d in 0..h + w - 1 {
        let lo = d.saturating_sub(w - 1);
        let hi = d.min(h - 1);
        for r in lo..=hi {
            let idx = r * w + (d - r);
            if mask.is_fluid(r, d - r) {
                slot[idx] = cells.len();
                cells.push(idx);
            }
        }
    }
    if cells.is_empty() {
        return Err(SolveError::EmptyFluid);
    }
    let n = cells.len();
    let inv_dx2 = 1.0 / (cfg.pixel_pitch * cfg.pixel_pitch);
    // Neighbor slots, usize::MAX for Dirichlet-zero sides.
    let mut nbrs = vec![[usize::MAX; 4]; n];
    for (s, &idx) in cells.iter().enumerate() {
        let (r, c) = (idx / w, idx % w);
        if r > 0 {
            nbrs[s][0] = slot[idx - w];
        }
        if r + 1 < h {
            nbrs[s][1] = slot[idx + w];
        }
        if c > 0 {
            nbrs[s][2] = slot[idx - 1];
        }
        if c + 1 < w {
            nbrs[s][3] = slot[idx + 1];
        }
    }
    // Branch-free stencil: missing neighbors point at the cell itself with
    // the diagonal bumped by one, which cancels exactly.
    let mut sdiag = vec![0.0f64; n];
    let mut stencil = vec![[0u32; 4]; n];
    for s in 0..n {
        let mut d = 4.0;
        for k in 0..4 {
            if nbrs[s][k] == usize::MAX {
                stencil[s][k] = s as u32;
                d += 1.0;
            } else {
                stencil[s][k] = nbrs[s][k] as u32;
            }
        }
        sdiag[s] = d;
    }
    let g_over_mu = 1.0 / cfg.viscosity;
    let b = vec![g_over_mu; n];
    let mut x = vec![0.0; n];
    let iters_cap = cfg.max_iterations.min(4 * n + 64);
    let pre = Ic0::build(&vec![4.0; n], &nbrs, 1.0);
    let mut scr = PcgScratch::new(n);
    let (iters, res) = pcg_solve(
        &stencil,
        &sdiag,
        inv_dx2,
        &pre,
        &b,
        &mut x,
        cfg.tolerance,
        iters_cap,
        &mut scr,
    );
    if res > cfg.tolerance {
        return Err(SolveError::NotConverged { iterations: iters, residual: res });
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let scale = cfg.mean_velocity / mean;
    let mut field = FlowField::zeros(h, w, SolveMode::Duct);
    for (s, &idx) in cells.iter().enumerate() {
        field.magnitude[idx] = x[s] * scale;
    }
    field.converged_residual = res;
    field.iterations = iters;
    Ok(field)
}

// ---------------------------------------------------------------------------
// Channel mode.

const FACE_SOLID: u8 = 0;
const FACE_FREE: u8 = 1;
const FACE_INLET: u8 = 2;
const FACE_OUTLET: u8 = 3;

struct ChannelGrid {
    h: usize,
    w: usize,
    /// Inlet-reachable fluid cells; unreachable pockets are frozen solid so
    /// the pressure system stays nonsingular.
    fluid: Vec<bool>,
    u_kind: Vec<u8>,
    v_kind: Vec<u8>,
    cells: Vec<usize>,
    slot: Vec<usize>,
}

impl ChannelGrid {
    fn build(mask: &RasterMask) -> Result<Self, SolveError> {
        let (h, w) = (mask.h, mask.w);
        let mut fluid = vec![false; h * w];
        let mut stack: Vec<usize> = Vec::new();
        for r in 0..h {
            if mask.is_fluid(r, 0) {
                fluid[r * w] = true;
                stack.push(r * w);
            }
        }
        if stack.is_empty() {
            return Err(SolveError::NoThroughPath);
        }
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / w, idx % w);
            let visit = |rr: usize, cc: usize, fluid: &mut Vec<bool>, stack: &mut Vec<usize>| {
                let j = rr * w + cc;
                if mask.is_fluid(rr, cc) && !fluid[j] {
                    fluid[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(r - 1, c, &mut fluid, &mut stack);
            }
            if r + 1 < h {
                visit(r + 1, c, &mut fluid, &mut stack);
            }
            if c > 0 {
                visit(r, c - 1, &mut fluid, &mut stack);
            }
            if c + 1 < w {
                visit(r, c + 1, &mut fluid, &mut stack);
            }
        }
        if !(0..h).any(|r| fluid[r * w + (w - 1)]) {
            return Err(SolveError::NoThroughPath);
        }
        let mut u_kind = vec![FACE_SOLID; h * (w + 1)];
        for r in 0..h {
            for j in 0..=w {
                let west = j > 0 && fluid[r * w + j - 1];
                let east = j < w && fluid[r * w + j];
                u_kind[r * (w + 1) + j] = match (j, west, east) {
                    (0, _, true) => FACE_INLET,
                    (j, true, _) if j == w => FACE_OUTLET,
                    (_, true, true) => FACE_FREE,
                    _ => FACE_SOLID,
                };
            }
        }
        let mut v_kind = vec![FACE_SOLID; (h + 1) * w];
        for i in 1..h {
            for c in 0..w {
                if fluid[(i - 1) * w + c] && fluid[i * w + c] {
                    v_kind[i * w + c] = FACE_FREE;
                }
            }
        }
        // Number fluid cells along anti-diagonal wavefronts. A cell's west
        // and north neighbors then sit in the previous front, so the
        // triangular sweeps of the factored pressure solve carry no
        // consecutive-element dependency and the loop pipelines; the factor
        // itself is unchanged because fronts are a topological order of the
        // same elimination graph as the row-major scan.
        let mut cells = Vec::new();
        let mut slot = vec![usize::MAX; h * w];
        for d in 0..h + w - 1 {
            let lo = d.saturating_sub(w - 1);
            let hi = d.min(h - 1);
            for i in lo..=hi {
                let idx = i * w + (d - i);
                if fluid[idx] {
                    slot[idx] = cells.len();
                    cells.push(idx);
                }
            }
        }
        Ok(ChannelGrid { h, w, fluid, u_kind, v_kind, cells, slot })
    }
}

/// Per-column starting guess: the inlet flux is split across each column's
/// fluid spans in proportion to span-height cubed, and each span blends a
/// flux-equivalent plug into a parabola vanishing at its wall faces, decaying
/// downstream on the Stokes entrance length. Cuts the pseudo-time transient
/// by an order of magnitude versus a zero start.
fn init_u_faces(grid: &ChannelGrid, u_inlet: f64, u: &mut [f64]) {
    let (h, w) = (grid.h, grid.w);
    let inlet_rows = (0..h).filter(|&r| grid.fluid[r * w]).count();
    let target_flux = u_inlet * inlet_rows as f64;
    let mut col_profile = vec![0.0f64; h];
    for j in 0..=w {
        // Face column j sees the fluid pattern shared by its two cell columns.
        let cell_fluid = |r: usize| -> bool {
            let west = j > 0 && grid.fluid[r * w + j - 1];
            let east = j < w && grid.fluid[r * w + j];
            match j {
                0 => east,
                _ if j == w => west,
                _ => west && east,
            }
        };
        col_profile.fill(0.0);
        let mut r = 0;
        let mut spans: Vec<(usize, usize)> = Vec::new();
        while r < h {
            if cell_fluid(r) {
                let start = r;
                while r < h && cell_fluid(r) {
                    r += 1;
                }
                spans.push((start, r));
            } else {
                r += 1;
            }
        }
        let weight: f64 = spans.iter().map(|&(a, b)| ((b - a) as f64).powi(3)).sum();
        if weight == 0.0 {
            continue;
        }
        for &(a, b) in &spans {
            let hh = (b - a) as f64;
            let span_flux = target_flux * hh.powi(3) / weight;
            // Parabola with zeros on the first solid face row either side; a
            // quadratic has an exact discrete second difference, so far from
            // the inlet this is already the steady interior profile. Near the
            // inlet the profile is still the plug the boundary imposes, so
            // blend plug into parabola with the leading Stokes eigenmode
            // decay rate (about 4.2 divided by the span height). Both shapes
            // carry span_flux, hence any blend conserves it.
            let mut shape_sum = 0.0;
            for i in a..b {
                shape_sum += ((i - a + 1) * (b - i)) as f64;
            }
            if shape_sum <= 0.0 {
                continue;
            }
            let scale = span_flux / shape_sum;
            let plug = span_flux / hh;
            let blend = (-(j as f64) * 4.2 / hh).exp();
            for i in a..b {
                let para = scale * ((i - a + 1) * (b - i)) as f64;
                col_profile[i] = para + blend * (plug - para);
            }
        }
        for i in 0..h {
            let k = grid.u_kind[i * (w + 1) + j];
            u[i * (w + 1) + j] = match k {
                FACE_INLET => u_inlet,
                FACE_FREE | FACE_OUTLET => col_profile[i],
                _ => 0.0,
            };
        }
    }
}

/// Completes the starting guess on straight-walled masks: v is chosen so the
/// discrete divergence of the initial field vanishes, integrating continuity
/// downward from the top wall through the entrance blend's x-variation. On
/// rough walls the same marching integrates wall steps into spurious
/// transverse flow that lengthens the march, so v stays zero there.
fn init_v_faces(grid: &ChannelGrid, u: &[f64], v: &mut [f64]) {
    let (h, w) = (grid.h, grid.w);
    let us = w + 1;
    for j in 1..w {
        for i in 0..h {
            if grid.fluid[i * w + j] != grid.fluid[i * w] {
                return;
            }
        }
    }
    for j in 0..w {
        let mut i = 0;
        while i < h {
            if !grid.fluid[i * w + j] {
                i += 1;
                continue;
            }
            let start = i;
            while i < h && grid.fluid[i * w + j] {
                i += 1;
            }
            let mut acc = 0.0;
            for r in start..i - 1 {
                acc -= u[r * us + j + 1] - u[r * us + j];
                if grid.v_kind[(r + 1) * w + j] == FACE_FREE {
                    v[(r + 1) * w + j] = acc;
                }
            }
        }
    }
}

/// Pseudo-time projection march of the steady incompressible momentum
/// equations. Explicit first-order upwind advection, explicit diffusion,
/// conjugate-gradient pressure projection with a zero-pressure outlet ghost;
/// no-slip enters through stair-step zero faces next to solid pixels.
pub fn solve_channel(mask: &RasterMask, cfg: &SolverConfig) -> Result<FlowField, SolveError> {
    cfg.validate()?;
    let grid = ChannelGrid::build(mask)?;
    let (h, w) = (grid.h, grid.w);
    let (us, vs) = (w + 1, w); // row strides for the face arrays
    let nu = cfg.viscosity / cfg.density;
    let dx = cfg.pixel_pitch;
    let u_in = cfg.mean_velocity;
    let n = grid.cells.len();

    let mut u = vec![0.0f64; h * us];
    let mut v = vec![0.0f64; (h + 1) * vs];
    init_u_faces(&grid, u_in, &mut u);
    init_v_faces(&grid, &u, &mut v);
    let mut u_new = u.clone();
    let mut v_new = v.clone();
    // Pressure in compacted cell order. The solve warm-starts from a
    // quadratic extrapolation of the last three pressures; the march changes
    // slowly, so the guess lands within a couple of orders of the answer and
    // the conjugate-gradient work per step collapses.
    let mut p = vec![0.0f64; n];
    let mut prev1 = vec![0.0f64; n];
    let mut prev2 = vec![0.0f64; n];
    let mut b = vec![0.0f64; n];
    let mut scr = PcgScratch::new(n);

    // Active face lists. Faces on the canvas edge rows or the first and last
    // columns need ghost handling and go on the slower edge lists; masks from
    // the rasterizer keep solid margins so those lists are tiny or empty.
    let mut u_free: Vec<u32> = Vec::new();
    let mut u_edge: Vec<u32> = Vec::new();
    let mut u_outlet: Vec<u32> = Vec::new();
    for i in 0..h {
        for j in 0..=w {
            let f = i * us + j;
            match grid.u_kind[f] {
                FACE_FREE => {
                    if i > 0 && i + 1 < h {
                        u_free.push(f as u32);
                    } else {
                        u_edge.push(f as u32);
                    }
                }
                FACE_OUTLET => u_outlet.push(f as u32),
                _ => {}
            }
        }
    }
    let mut v_free: Vec<u32> = Vec::new();
    let mut v_edge: Vec<u32> = Vec::new();
    for i in 1..h {
        for j in 0..w {
            let f = i * vs + j;
            if grid.v_kind[f] == FACE_FREE {
                if j > 0 && j + 1 < w {
                    v_free.push(f as u32);
                } else {
                    v_edge.push(f as u32);
                }
            }
        }
    }

    // Pressure links per cell: a face that will receive a correction couples
    // the two pressures it separates; outlet faces couple to a zero ghost.
    // Missing links point at the cell itself with the diagonal bumped by one,
    // which cancels exactly and keeps the CG stencil branch-free.
    let mut diag = vec![0.0f64; n];
    let mut link = vec![[usize::MAX; 4]; n]; // W, E, N, S neighbor slots
    let mut outlet_slot = vec![false; n];
    for (s, &idx) in grid.cells.iter().enumerate() {
        let (i, j) = (idx / w, idx % w);
        let mut d = 0.0;
        if grid.u_kind[i * us + j] == FACE_FREE {
            link[s][0] = grid.slot[idx - 1];
            d += 1.0;
        }
        match grid.u_kind[i * us + j + 1] {
            FACE_FREE => {
                link[s][1] = grid.slot[idx + 1];
                d += 1.0;
            }
            FACE_OUTLET => {
                outlet_slot[s] = true;
                d += 1.0;
            }
            _ => {}
        }
        if grid.v_kind[i * vs + j] == FACE_FREE {
            link[s][2] = grid.slot[idx - w];
            d += 1.0;
        }
        if grid.v_kind[(i + 1) * vs + j] == FACE_FREE {
            link[s][3] = grid.slot[idx + w];
            d += 1.0;
        }
        diag[s] = d;
    }
    let mut stencil_diag = vec![0.0f64; n];
    let mut stencil = vec![[0u32; 4]; n];
    for s in 0..n {
        let mut d = diag[s];
        for k in 0..4 {
            if link[s][k] == usize::MAX {
                stencil[s][k] = s as u32;
                d += 1.0;
            } else {
                stencil[s][k] = link[s][k] as u32;
            }
        }
        stencil_diag[s] = d;
    }
    // Face indices per cell for the divergence and the correction sweep.
    let face_ix: Vec<[u32; 4]> = grid
        .cells
        .iter()
        .map(|&idx| {
            let (i, j) = (idx / w, idx % w);
            [
                (i * us + j) as u32,       // west u
                (i * us + j + 1) as u32,   // east u
                (i * vs + j) as u32,       // north v
                ((i + 1) * vs + j) as u32, // south v
            ]
        })
        .collect();
    let inv_dx2 = 1.0 / (dx * dx);
    let inv_dx = 1.0 / dx;
    // The projection matrix never changes, so factor it once.
    let pre = Ic0::build(&diag, &link, 1.0);

    let mut max_vel: f64 = u_in * 1.5;
    let mut last_delta = f64::INFINITY;
    let mut converged = false;
    let mut steps = 0usize;
    for step in 0..cfg.max_iterations {
        steps = step + 1;
        let dt = 0.4 * (dx * dx / (4.0 * nu)).min(dx / max_vel);

        // Momentum predictor for u faces (interior fast path).
        for &f32idx in &u_free {
            let f = f32idx as usize;
            let j = f % us;
            let row = f / us;
            let uc = u[f];
            let uw = u[f - 1];
            let ue = u[f + 1];
            let un = u[f - us];
            let uso = u[f + us];
            // v averaged from the four horizontal faces around this face.
            let vnw = v[row * vs + j - 1];
            let vne = v[row * vs + j];
            let vsw = v[(row + 1) * vs + j - 1];
            let vse = v[(row + 1) * vs + j];
            let vbar = 0.25 * (vnw + vne + vsw + vse);
            let dudx = (if uc > 0.0 { uc - uw } else { ue - uc }) * inv_dx;
            let dudy = (if vbar > 0.0 { uc - un } else { uso - uc }) * inv_dx;
            let lap = (uw + ue + un + uso - 4.0 * uc) * inv_dx2;
            u_new[f] = uc + dt * (nu * lap - uc * dudx - vbar * dudy);
        }
        for &f32idx in &u_edge {
            let f = f32idx as usize;
            let (i, j) = (f / us, f % us);
            let uc = u[f];
            let uw = u[f - 1];
            let ue = u[f + 1];
            let un = if i > 0 { u[f - us] } else { 0.0 };
            let uso = if i + 1 < h { u[f + us] } else { 0.0 };
            let vbar = 0.25
                * (v[i * vs + j - 1] + v[i * vs + j] + v[(i + 1) * vs + j - 1]
                    + v[(i + 1) * vs + j]);
            let dudx = (if uc > 0.0 { uc - uw } else { ue - uc }) * inv_dx;
            let dudy = (if vbar > 0.0 { uc - un } else { uso - uc }) * inv_dx;
            let lap = (uw + ue + un + uso - 4.0 * uc) * inv_dx2;
            u_new[f] = uc + dt * (nu * lap - uc * dudx - vbar * dudy);
        }
        // Outlet faces copy their upstream neighbor (zero gradient) before
        // the projection nudges them.
        for &f32idx in &u_outlet {
            let f = f32idx as usize;
            u_new[f] = u_new[f - 1];
        }
        // Momentum predictor for v faces.
        for &f32idx in &v_free {
            let f = f32idx as usize;
            let (i, j) = (f / vs, f % vs);
            let vc = v[f];
            let vn = v[f - vs];
            let vso = v[f + vs];
            let vw = v[f - 1];
            let ve = v[f + 1];
            let ubar = 0.25
                * (u[(i - 1) * us + j]
                    + u[(i - 1) * us + j + 1]
                    + u[i * us + j]
                    + u[i * us + j + 1]);
            let dvdx = (if ubar > 0.0 { vc - vw } else { ve - vc }) * inv_dx;
            let dvdy = (if vc > 0.0 { vc - vn } else { vso - vc }) * inv_dx;
            let lap = (vw + ve + vn + vso - 4.0 * vc) * inv_dx2;
            v_new[f] = vc + dt * (nu * lap - ubar * dvdx - vc * dvdy);
        }
        for &f32idx in &v_edge {
            let f = f32idx as usize;
            let (i, j) = (f / vs, f % vs);
            let vc = v[f];
            let vn = v[f - vs];
            let vso = v[f + vs];
            let vw = if j > 0 { v[f - 1] } else { 0.0 };
            let ve = if j + 1 < w { v[f + 1] } else { v[f] };
            let ubar = 0.25
                * (u[(i - 1) * us + j]
                    + u[(i - 1) * us + j + 1]
                    + u[i * us + j]
                    + u[i * us + j + 1]);
            let dvdx = (if ubar > 0.0 { vc - vw } else { ve - vc }) * inv_dx;
            let dvdy = (if vc > 0.0 { vc - vn } else { vso - vc }) * inv_dx;
            let lap = (vw + ve + vn + vso - 4.0 * vc) * inv_dx2;
            v_new[f] = vc + dt * (nu * lap - ubar * dvdx - vc * dvdy);
        }

        // Projection: lap(p) = (rho/dt) div(u*), then subtract the gradient.
        // Each corrected face is touched exactly once: free u-faces by the
        // cell on their east side, free v-faces by the cell above, outlet
        // faces by their upstream cell.
        let bscale = -(cfg.density / dt) * inv_dx;
        for s in 0..n {
            let fx = &face_ix[s];
            let d = u_new[fx[1] as usize] - u_new[fx[0] as usize] + v_new[fx[3] as usize]
                - v_new[fx[2] as usize];
            b[s] = bscale * d;
        }
        // Rotate the pressure history and extrapolate the starting guess.
        for k in 0..n {
            let h1 = p[k];
            let h2 = prev1[k];
            let h3 = prev2[k];
            let g = match step {
                0 | 1 => h1,
                2 => 2.0 * h1 - h2,
                _ => 3.0 * (h1 - h2) + h3,
            };
            prev2[k] = h2;
            prev1[k] = h1;
            p[k] = g;
        }
        let (_iters, _) = pcg_solve(
            &stencil,
            &stencil_diag,
            inv_dx2,
            &pre,
            &b,
            &mut p,
            1.0e-8,
            4 * n + 128,
            &mut scr,
        );
        let gscale = dt / (cfg.density * dx);
        for s in 0..n {
            let fx = &face_ix[s];
            let ps = p[s];
            if link[s][0] != usize::MAX {
                u_new[fx[0] as usize] -= gscale * (ps - p[link[s][0]]);
            }
            if outlet_slot[s] {
                u_new[fx[1] as usize] += gscale * ps;
            }
            if link[s][3] != usize::MAX {
                v_new[fx[3] as usize] -= gscale * (p[link[s][3]] - ps);
            }
        }

        // Convergence bookkeeping over the faces that can change.
        let mut delta = 0.0f64;
        let mut mv: f64 = u_in;
        for &f32idx in u_free.iter().chain(&u_edge).chain(&u_outlet) {
            let f = f32idx as usize;
            let val = u_new[f];
            delta = delta.max((val - u[f]).abs());
            mv = mv.max(val.abs());
        }
        for &f32idx in v_free.iter().chain(&v_edge) {
            let f = f32idx as usize;
            let val = v_new[f];
            delta = delta.max((val - v[f]).abs());
            mv = mv.max(val.abs());
        }
        if !(delta.is_finite() && mv.is_finite()) {
            return Err(SolveError::UnstableTimestep { step });
        }
        std::mem::swap(&mut u, &mut u_new);
        std::mem::swap(&mut v, &mut v_new);
        max_vel = mv.max(1.0e-12);
        last_delta = delta / u_in;
        if last_delta < cfg.tolerance {
            let mut max_div = 0.0f64;
            for s in 0..n {
                let fx = &face_ix[s];
                let d = u[fx[1] as usize] - u[fx[0] as usize] + v[fx[3] as usize]
                    - v[fx[2] as usize];
                max_div = max_div.max(d.abs());
            }
            // d above is already divergence times dx.
            if max_div / u_in < cfg.tolerance * 1.0e-2 {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        return Err(SolveError::NotConverged { iterations: steps, residual: last_delta });
    }

    // Collocate face velocities onto pixel centers.
    let mut field = FlowField::zeros(h, w, SolveMode::Channel);
    for &idx in grid.cells.iter() {
        let (i, j) = (idx / w, idx % w);
        let uc = 0.5 * (u[i * us + j] + u[i * us + j + 1]);
        let vc = 0.5 * (v[i * vs + j] + v[(i + 1) * vs + j]);
        field.u[idx] = uc;
        field.v[idx] = vc;
        field.magnitude[idx] = (uc * uc + vc * vc).sqrt();
    }
    let mut pgrid = vec![0.0f64; h * w];
    for (s, &idx) in grid.cells.iter().enumerate() {
        pgrid[idx] = p[s];
    }
    field.pressure = Some(pgrid);
    field.converged_residual = last_delta;
    field.iterations = steps;
    field.staggered = Some(StaggeredField { u_faces: u, v_faces: v });
    Ok(field)
}

/// Dispatch on the configured mode.
pub fn solve(mask: &RasterMask, cfg: &SolverConfig) -> Result<FlowField, SolveError> {
    match cfg.mode {
        SolveMode::Duct => solve_duct(mask, cfg),
        SolveMode::Channel => solve_channel(mask, cfg),
    }
}

// ---------------------------------------------------------------------------
// Residual reporting.

/// L-infinity and L2 norms of the discrete continuity and momentum residuals
/// over interior fluid pixels.
#[derive(Clone, Copy, Debug, Default)]
pub struct ResidualNorms {
    pub continuity_linf: f64,
    pub continuity_l2: f64,
    pub momentum_x_linf: f64,
    pub momentum_x_l2: f64,
    pub momentum_y_linf: f64,
    pub momentum_y_l2: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualReport {
    /// SI units: continuity in 1/s, momentum in m/s^2.
    pub dimensional: ResidualNorms,
    /// Continuity scaled by dx/U, momentum by dx/U^2.
    pub nondimensional: ResidualNorms,
}

/// Evaluates mass and momentum residuals on the interior fluid pixels (all
/// four neighbors fluid). Fields carrying their staggered faces get the exact
/// divergence the projection enforced; hand-built collocated fields fall back
/// to central differences. Momentum always uses central differences on the
/// collocated grids, with a zero pressure where none is stored.
pub fn residual_report(
    field: &FlowField,
    mask: &RasterMask,
    cfg: &SolverConfig,
) -> Result<ResidualReport, SolveError> {
    if field.h != mask.h || field.w != mask.w {
        return Err(SolveError::ShapeMismatch {
            fh: field.h,
            fw: field.w,
            mh: mask.h,
            mw: mask.w,
        });
    }
    let (h, w) = (field.h, field.w);
    let dx = cfg.pixel_pitch;
    let uref = cfg.mean_velocity;
    let nu = cfg.viscosity / cfg.density;
    let inv_rho = 1.0 / cfg.density;
    let zero_p = vec![0.0f64; h * w];
    let p = field.pressure.as_deref().unwrap_or(&zero_p);

    let mut cont = Accum::default();
    let mut momx = Accum::default();
    let mut momy = Accum::default();
    for i in 1..h.saturating_sub(1) {
        for j in 1..w.saturating_sub(1) {
            let idx = i * w + j;
            let interior = mask.is_fluid(i, j)
                && mask.is_fluid(i - 1, j)
                && mask.is_fluid(i + 1, j)
                && mask.is_fluid(i, j - 1)
                && mask.is_fluid(i, j + 1);
            if !interior {
                continue;
            }
            let c = match &field.staggered {
                Some(st) => {
                    let us = w + 1;
                    (st.u_faces[i * us + j + 1] - st.u_faces[i * us + j]
                        + st.v_faces[(i + 1) * w + j]
                        - st.v_faces[i * w + j])
                        / dx
                }
                None => {
                    (field.u[idx + 1] - field.u[idx - 1] + field.v[idx + w] - field.v[idx - w])
                        / (2.0 * dx)
                }
            };
            cont.push(c);

            let (uc, vc) = (field.u[idx], field.v[idx]);
            let ddx = |f: &[f64]| (f[idx + 1] - f[idx - 1]) / (2.0 * dx);
            let ddy = |f: &[f64]| (f[idx + w] - f[idx - w]) / (2.0 * dx);
            let lap = |f: &[f64]| {
                (f[idx + 1] + f[idx - 1] + f[idx + w] + f[idx - w] - 4.0 * f[idx]) / (dx * dx)
            };
            momx.push(
                uc * ddx(&field.u) + vc * ddy(&field.u) + inv_rho * ddx(p) - nu * lap(&field.u),
            );
            momy.push(
                uc * ddx(&field.v) + vc * ddy(&field.v) + inv_rho * ddy(p) - nu * lap(&field.v),
            );
        }
    }
    let dimensional = ResidualNorms {
        continuity_linf: cont.linf,
        continuity_l2: cont.l2(),
        momentum_x_linf: momx.linf,
        momentum_x_l2: momx.l2(),
        momentum_y_linf: momy.linf,
        momentum_y_l2: momy.l2(),
    };
    let (sc, sm) = (dx / uref, dx / (uref * uref));
    let nondimensional = ResidualNorms {
        continuity_linf: dimensional.continuity_linf * sc,
        continuity_l2: dimensional.continuity_l2 * sc,
        momentum_x_linf: dimensional.momentum_x_linf * sm,
        momentum_x_l2: dimensional.momentum_x_l2 * sm,
        momentum_y_linf: dimensional.momentum_y_linf * sm,
        momentum_y_l2: dimensional.momentum_y_l2 * sm,
    };
    Ok(ResidualReport { dimensional, nondimensional })
}

#[derive(Default)]
struct Accum {
    linf: f64,
    sumsq: f64,
    count: usize,
}

impl Accum {
    fn push(&mut self, v: f64) {
        self.linf = self.linf.max(v.abs());
        self.sumsq += v * v;
        self.count += 1;
    }
    fn l2(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.sumsq / self.count as f64).sqrt()
        }
    }
}

// ---------------------------------------------------------------------------
// Target channels and debug dumps.

/// Divides each requested channel by the reference velocity and forces
/// non-fluid pixels to exactly zero. Channel order is (u, v) for component
/// targets and (magnitude) alone for magnitude targets.
pub fn nondimensionalize(
    field: &FlowField,
    mask: &RasterMask,
    cfg: &SolverConfig,
    target: TargetMode,
) -> Result<Vec<Vec<f32>>, SolveError> {
    if field.h != mask.h || field.w != mask.w {
        return Err(SolveError::ShapeMismatch {
            fh: field.h,
            fw: field.w,
            mh: mask.h,
            mw: mask.w,
        });
    }
    let inv_u = 1.0 / cfg.mean_velocity;
    let scale = |src: &[f64]| -> Vec<f32> {
        src.iter()
            .enumerate()
            .map(|(idx, &val)| {
                let (r, c) = (idx / field.w, idx % field.w);
                if mask.is_fluid(r, c) {
                    (val * inv_u) as f32
                } else {
                    0.0
                }
            })
            .collect()
    };
    Ok(match target {
        TargetMode::Components => vec![scale(&field.u), scale(&field.v)],
        TargetMode::Magnitude => vec![scale(&field.magnitude)],
    })
}

/// Channel ids for the debug dump format.
pub const CHAN_U: u32 = 0;
pub const CHAN_V: u32 = 1;
pub const CHAN_MAGNITUDE: u32 = 2;
pub const CHAN_PRESSURE: u32 = 3;

/// Writes one field channel as "MFLD", u32 h, u32 w, u32 channel-id, then
/// row-major little-endian f32 values.
pub fn write_field_dump<W: IoWrite>(
    out: &mut W,
    field: &FlowField,
    channel: u32,
) -> Result<(), SolveError> {
    let data: &[f64] = match channel {
        CHAN_U => &field.u,
        CHAN_V => &field.v,
        CHAN_MAGNITUDE => &field.magnitude,
        CHAN_PRESSURE => field
            .pressure
            .as_deref()
            .ok_or(SolveError::MissingChannel("pressure"))?,
        _ => return Err(SolveError::MissingChannel("unknown")),
    };
    let mut buf = Vec::with_capacity(16 + data.len() * 4);
    buf.extend_from_slice(b"MFLD");
    buf.extend_from_slice(&(field.h as u32).to_le_bytes());
    buf.extend_from_slice(&(field.w as u32).to_le_bytes());
    buf.extend_from_slice(&channel.to_le_bytes());
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf).map_err(|_| SolveError::MissingChannel("io"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rasterize_channel, ChannelProfile, WmParams};

    fn circle_mask(radius: f64) -> RasterMask {
        let p = WmParams::new(1.5, 1.5, 1.0, 1, radius, 0.0).unwrap();
        let curve = crate::geometry::sample_curve(&p, 4096, (128.0, 64.0)).unwrap();
        crate::geometry::rasterize_curve(&curve, 128, 256).unwrap()
    }

    fn small_channel(h: usize, w: usize, half: f64) -> RasterMask {
        let p = WmParams::new(1.5, 1.5, 1.0, 1, half, 0.0).unwrap();
        let profile = ChannelProfile::from_params(&p, w, h as f64 / 2.0).unwrap();
        rasterize_channel(&profile, h, w).unwrap()
    }

    #[test]
    fn duct_rejects_all_solid_mask() {
        let mask = RasterMask::solid(8, 8);
        let err = solve_duct(&mask, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, SolveError::EmptyFluid));
    }

    #[test]
    fn duct_field_doubles_with_mean_velocity() {
        let mask = circle_mask(30.0);
        let cfg = SolverConfig::default();
        let f1 = solve_duct(&mask, &cfg).unwrap();
        let mut cfg2 = cfg;
        cfg2.mean_velocity = 0.1;
        let f2 = solve_duct(&mask, &cfg2).unwrap();
        for (a, b) in f1.magnitude.iter().zip(&f2.magnitude) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn duct_mean_equals_configured_velocity() {
        let mask = circle_mask(40.0);
        let cfg = SolverConfig::default();
        let f = solve_duct(&mask, &cfg).unwrap();
        let n = mask.fluid_count() as f64;
        let mean = f.magnitude.iter().sum::<f64>() / n;
        assert!((mean - cfg.mean_velocity).abs() < 1e-12 * cfg.mean_velocity);
    }

    #[test]
    fn channel_needs_a_through_path() {
        let mut mask = small_channel(32, 64, 8.0);
        // Solid wall across the full height at midlength.
        let bytes: Vec<u8> = (0..32 * 64)
            .map(|idx| {
                let (r, c) = (idx / 64, idx % 64);
                if c == 32 {
                    1
                } else if mask.is_fluid(r, c) {
                    0
                } else {
                    1
                }
            })
            .collect();
        mask = RasterMask::from_bytes(32, 64, bytes).unwrap();
        let mut cfg = SolverConfig::default();
        cfg.mode = SolveMode::Channel;
        assert!(matches!(solve_channel(&mask, &cfg), Err(SolveError::NoThroughPath)));
    }

    #[test]
    fn small_channel_conserves_mass_and_mirrors() {
        let mask = small_channel(32, 64, 8.0);
        let mut cfg = SolverConfig::default();
        cfg.mode = SolveMode::Channel;
        let f = solve_channel(&mask, &cfg).unwrap();
        let q_in = f.column_flux(0, &cfg).unwrap();
        let q_out = f.column_flux(64, &cfg).unwrap();
        assert!((q_in - q_out).abs() <= 5e-3 * q_in.abs(), "{q_in} vs {q_out}");
        // Mask is symmetric about the horizontal centerline.
        let tol = 10.0 * cfg.tolerance * cfg.mean_velocity;
        for i in 0..16 {
            for j in 0..64 {
                let a = f.u[i * 64 + j];
                let b = f.u[(31 - i) * 64 + j];
                assert!((a - b).abs() < tol, "u asymmetry at ({i},{j}): {a} vs {b}");
                let va = f.v[i * 64 + j];
                let vb = f.v[(31 - i) * 64 + j];
                assert!((va + vb).abs() < tol, "v asymmetry at ({i},{j})");
            }
        }
    }

    #[test]
    fn converged_channel_report_meets_continuity_contract() {
        let mask = small_channel(32, 64, 8.0);
        let mut cfg = SolverConfig::default();
        cfg.mode = SolveMode::Channel;
        let f = solve_channel(&mask, &cfg).unwrap();
        let rep = residual_report(&f, &mask, &cfg).unwrap();
        assert!(rep.nondimensional.continuity_linf < 10.0 * cfg.tolerance);
    }

    #[test]
    fn zero_field_has_zero_residuals() {
        let mask = small_channel(16, 32, 4.0);
        let cfg = SolverConfig::default();
        let f = FlowField::zeros(16, 32, SolveMode::Channel);
        let rep = residual_report(&f, &mask, &cfg).unwrap();
        assert_eq!(rep.dimensional.continuity_linf, 0.0);
        assert_eq!(rep.dimensional.momentum_x_linf, 0.0);
        assert_eq!(rep.dimensional.momentum_y_linf, 0.0);
    }

    #[test]
    fn linear_u_gives_inverse_pitch_divergence() {
        // u = column index, all pixels fluid except the border.
        let (h, w) = (5, 5);
        let bytes = vec![0u8; h * w];
        let mask = RasterMask::from_bytes(h, w, bytes).unwrap();
        let mut f = FlowField::zeros(h, w, SolveMode::Channel);
        for i in 0..h {
            for j in 0..w {
                f.u[i * w + j] = j as f64;
            }
        }
        let cfg = SolverConfig::default();
        let rep = residual_report(&f, &mask, &cfg).unwrap();
        let expect = 1.0 / cfg.pixel_pitch;
        assert!(
            (rep.dimensional.continuity_linf - expect).abs() < 1e-6 * expect,
            "{} vs {expect}",
            rep.dimensional.continuity_linf
        );
    }

    #[test]
    fn report_rejects_mismatched_shapes() {
        let mask = small_channel(16, 32, 4.0);
        let f = FlowField::zeros(8, 8, SolveMode::Channel);
        let cfg = SolverConfig::default();
        assert!(matches!(
            residual_report(&f, &mask, &cfg),
            Err(SolveError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn nondimensional_channels_mask_and_scale() {
        let mask = small_channel(16, 32, 4.0);
        let cfg = SolverConfig::default();
        let mut f = FlowField::zeros(16, 32, SolveMode::Channel);
        for val in f.u.iter_mut() {
            *val = cfg.mean_velocity;
        }
        let ch = nondimensionalize(&f, &mask, &cfg, TargetMode::Components).unwrap();
        assert_eq!(ch.len(), 2);
        for (idx, &val) in ch[0].iter().enumerate() {
            let (r, c) = (idx / 32, idx % 32);
            if mask.is_fluid(r, c) {
                assert_eq!(val, 1.0);
            } else {
                assert_eq!(val, 0.0);
            }
        }
        let mag = nondimensionalize(&f, &mask, &cfg, TargetMode::Magnitude).unwrap();
        assert_eq!(mag.len(), 1);
    }

    #[test]
    fn dump_header_layout() {
        let f = FlowField::zeros(2, 3, SolveMode::Duct);
        let mut buf = Vec::new();
        write_field_dump(&mut buf, &f, CHAN_MAGNITUDE).unwrap();
        assert_eq!(&buf[0..4], b"MFLD");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(buf.len(), 16 + 6 * 4);
        assert!(matches!(
            write_field_dump(&mut buf, &f, CHAN_PRESSURE),
            Err(SolveError::MissingChannel("pressure"))
        ));
    }

    #[test]
    fn solver_is_deterministic() {
        let mask = small_channel(32, 64, 8.0);
        let mut cfg = SolverConfig::default();
        cfg.mode = SolveMode::Channel;
        let a = solve_channel(&mask, &cfg).unwrap();
        let b = solve_channel(&mask, &cfg).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.v, b.v);
        assert_eq!(a.magnitude, b.magnitude);
    }
}
