//! Implicit finite-difference groundwater flow and tracer transport.
//!
//! Both equations are discretised on the cell-centred [`Grid2D`] with a
//! five-point stencil and advanced with backward Euler. Interface
//! permeabilities are harmonic means of the adjacent cells; advection is
//! first-order upwind, which keeps the transport matrix an M-matrix and the
//! solution bounded by its initial and Dirichlet values.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, LogPermField};
use crate::linsolve::{bicgstab, BandedCholesky, Bicgstab, CsrMatrix, Ilu0, Jacobi};

const MAX_PICARD_ITERATIONS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluidProps {
    /// Density, kg/m^3.
    pub rho_f: f64,
    /// Dynamic viscosity, Pa s.
    pub mu_f: f64,
    /// Gravitational acceleration, m/s^2.
    pub g: f64,
}

impl Default for FluidProps {
    fn default() -> Self {
        FluidProps { rho_f: 1000.0, mu_f: 1.0e-3, g: 9.81 }
    }
}

impl FluidProps {
    /// `rho g / mu`, converting permeability (m^2) to hydraulic conductivity.
    pub fn conductivity_factor(&self) -> f64 {
        self.rho_f * self.g / self.mu_f
    }

    pub fn validate(&self) -> Result<()> {
        if [self.rho_f, self.mu_f, self.g].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("fluid properties must be strictly positive"))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RockProps {
    pub porosity: f64,
    /// Specific storage, 1/m.
    pub specific_storage: f64,
}

impl RockProps {
    pub fn validate(&self) -> Result<()> {
        if !(self.porosity > 0.0 && self.porosity <= 1.0) {
            return Err(Error::invalid(format!("porosity must lie in (0, 1], got {}", self.porosity)));
        }
        if !(self.specific_storage > 0.0 && self.specific_storage.is_finite()) {
            return Err(Error::invalid("specific storage must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EdgeCondition {
    /// The whole row or column of boundary cells is held at `value`.
    Dirichlet { value: f64 },
    /// Zero flux through the outer faces.
    NoFlow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedCell {
    pub cell: usize,
    pub value: f64,
}

/// Boundary conditions for one variable. Corner cells take the north/south
/// value when two Dirichlet edges meet; fixed interior cells override edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySpec {
    pub south: EdgeCondition,
    pub north: EdgeCondition,
    pub west: EdgeCondition,
    pub east: EdgeCondition,
    #[serde(default)]
    pub fixed_cells: Vec<FixedCell>,
}

impl BoundarySpec {
    pub fn uniform(cond: EdgeCondition) -> Self {
        BoundarySpec { south: cond, north: cond, west: cond, east: cond, fixed_cells: Vec::new() }
    }

    pub fn validate(&self, grid: &Grid2D) -> Result<()> {
        for edge in [self.south, self.north, self.west, self.east] {
            if let EdgeCondition::Dirichlet { value } = edge {
                if !value.is_finite() {
                    return Err(Error::invalid("Dirichlet values must be finite"));
                }
            }
        }
        for fc in &self.fixed_cells {
            if fc.cell >= grid.n_cells() || !fc.value.is_finite() {
                return Err(Error::invalid(format!("fixed cell {} is outside the grid or not finite", fc.cell)));
            }
        }
        Ok(())
    }

    /// Prescribed value per cell, `None` for cells that are solved for.
    pub fn dirichlet_values(&self, grid: &Grid2D) -> Vec<Option<f64>> {
        let mut out = vec![None; grid.n_cells()];
        let (nx, ny) = (grid.nx, grid.ny);
        if let EdgeCondition::Dirichlet { value } = self.west {
            (0..ny).for_each(|j| out[grid.index(0, j)] = Some(value));
        }
        if let EdgeCondition::Dirichlet { value } = self.east {
            (0..ny).for_each(|j| out[grid.index(nx - 1, j)] = Some(value));
        }
        if let EdgeCondition::Dirichlet { value } = self.south {
            (0..nx).for_each(|i| out[grid.index(i, 0)] = Some(value));
        }
        if let EdgeCondition::Dirichlet { value } = self.north {
            (0..nx).for_each(|i| out[grid.index(i, ny - 1)] = Some(value));
        }
        for fc in &self.fixed_cells {
            out[fc.cell] = Some(fc.value);
        }
        out
    }

    pub fn apply(&self, grid: &Grid2D, values: &mut [f64]) {
        for (v, d) in values.iter_mut().zip(self.dirichlet_values(grid)) {
            if let Some(d) = d {
                *v = d;
            }
        }
    }
}

/// Linear solver used for the flow system. Transport always uses BiCGSTAB.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSolver {
    /// Banded Cholesky, factored once per [`FlowSystem`].
    #[default]
    BandedCholesky,
    Bicgstab,
}

/// Preconditioner of the transport BiCGSTAB solve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportPreconditioner {
    #[default]
    Ilu0,
    Jacobi,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub picard_rel_tol: f64,
    pub linear_rel_tol: f64,
    pub linear_max_iter: usize,
    #[serde(default)]
    pub flow_solver: FlowSolver,
    #[serde(default)]
    pub transport_preconditioner: TransportPreconditioner,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            picard_rel_tol: 1e-10,
            linear_rel_tol: 1e-14,
            linear_max_iter: 500,
            flow_solver: FlowSolver::default(),
            transport_preconditioner: TransportPreconditioner::default(),
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t < 1.0;
        if !ok(self.picard_rel_tol) || !ok(self.linear_rel_tol) || self.linear_max_iter == 0 {
            return Err(Error::invalid("solver tolerances must lie in (0, 1) and max_iter >= 1"));
        }
        Ok(())
    }
}

/// Head (m) and optional tracer concentration (mol/l) per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicState {
    pub head: Vec<f64>,
    pub conc: Option<Vec<f64>>,
}

impl DynamicState {
    pub fn is_finite(&self) -> bool {
        self.head.iter().chain(self.conc.iter().flatten()).all(|v| v.is_finite())
    }
}

/// Darcy velocities on cell faces, positive in +x / +y.
///
/// `vx[j * (nx + 1) + i]` is the face west of cell `(i, j)`;
/// `vy[j * nx + i]` is the face south of cell `(i, j)`. Faces on the outer
/// boundary carry zero velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceVelocity {
    pub grid: Grid2D,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
}

impl FaceVelocity {
    pub fn zeros(grid: Grid2D) -> Self {
        FaceVelocity { grid, vx: vec![0.0; (grid.nx + 1) * grid.ny], vy: vec![0.0; grid.nx * (grid.ny + 1)] }
    }

    #[inline]
    pub fn west(&self, i: usize, j: usize) -> f64 {
        self.vx[j * (self.grid.nx + 1) + i]
    }

    #[inline]
    pub fn south(&self, i: usize, j: usize) -> f64 {
        self.vy[j * self.grid.nx + i]
    }
}

#[inline]
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Interface permeabilities (harmonic means), laid out like [`FaceVelocity`].
fn face_permeability(grid: &Grid2D, k: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (nx, ny) = (grid.nx, grid.ny);
    let mut kx = vec![0.0; (nx + 1) * ny];
    let mut ky = vec![0.0; nx * (ny + 1)];
    for j in 0..ny {
        for i in 1..nx {
            kx[j * (nx + 1) + i] = harmonic_mean(k[grid.index(i - 1, j)], k[grid.index(i, j)]);
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            ky[j * nx + i] = harmonic_mean(k[grid.index(i, j - 1)], k[grid.index(i, j)]);
        }
    }
    (kx, ky)
}

fn check_len(grid: &Grid2D, v: &[f64]) -> Result<()> {
    if v.len() != grid.n_cells() {
        return Err(Error::ShapeMismatch { expected: grid.n_cells(), found: v.len() });
    }
    Ok(())
}

/// Darcy velocity `v = -(rho g / mu) K_face dh/dn` on every interior face.
pub fn darcy_velocity(perm: &LogPermField, head: &[f64], fluid: &FluidProps) -> Result<FaceVelocity> {
    let grid = perm.grid;
    check_len(&grid, head)?;
    let (kx, ky) = face_permeability(&grid, &perm.permeability());
    let mut vel = FaceVelocity::zeros(grid);
    fill_velocity(&grid, fluid.conductivity_factor(), &kx, &ky, head, &mut vel);
    Ok(vel)
}

fn fill_velocity(grid: &Grid2D, factor: f64, kx: &[f64], ky: &[f64], head: &[f64], vel: &mut FaceVelocity) {
    let (nx, ny) = (grid.nx, grid.ny);
    for j in 0..ny {
        for i in 1..nx {
            let f = j * (nx + 1) + i;
            vel.vx[f] = -factor * kx[f] * (head[grid.index(i, j)] - head[grid.index(i - 1, j)]) / grid.dx;
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            let f = j * nx + i;
            vel.vy[f] = -factor * ky[f] * (head[grid.index(i, j)] - head[grid.index(i, j - 1)]) / grid.dy;
        }
    }
}

/// Neighbour of `(i, j)` through each of the four faces, with the face's
/// geometric factor (face length / centre distance) and face slot.
#[derive(Clone, Copy, Debug)]
enum Face {
    West,
    East,
    South,
    North,
}

fn neighbours(grid: &Grid2D, i: usize, j: usize) -> impl Iterator<Item = (usize, Face)> {
    let (nx, ny) = (grid.nx, grid.ny);
    let g = *grid;
    [
        (i > 0).then(|| (g.index(i - 1, j), Face::West)),
        (i + 1 < nx).then(|| (g.index(i + 1, j), Face::East)),
        (j > 0).then(|| (g.index(i, j - 1), Face::South)),
        (j + 1 < ny).then(|| (g.index(i, j + 1), Face::North)),
    ]
    .into_iter()
    .flatten()
}

/// Maps grid cells to unknowns of the reduced (Dirichlet-free) system.
#[derive(Clone, Debug)]
struct FreeCells {
    dirichlet: Vec<Option<f64>>,
    unknown_of: Vec<Option<usize>>,
    cells: Vec<usize>,
}

impl FreeCells {
    fn new(grid: &Grid2D, bc: &BoundarySpec) -> Self {
        let dirichlet = bc.dirichlet_values(grid);
        let mut unknown_of = vec![None; grid.n_cells()];
        let mut cells = Vec::new();
        for (cell, d) in dirichlet.iter().enumerate() {
            if d.is_none() {
                unknown_of[cell] = Some(cells.len());
                cells.push(cell);
            }
        }
        FreeCells { dirichlet, unknown_of, cells }
    }
}

/// Assembled backward-Euler flow operator for one permeability field and
/// time step. Coefficients do not depend on head, so it is reused across
/// steps.
#[derive(Clone, Debug)]
pub struct FlowSystem {
    grid: Grid2D,
    free: FreeCells,
    matrix: CsrMatrix,
    storage: f64,
    /// Contribution of Dirichlet neighbours to each row's right-hand side.
    boundary_rhs: Vec<f64>,
    cholesky: OnceLock<BandedCholesky>,
    factor: f64,
    kx: Vec<f64>,
    ky: Vec<f64>,
}

impl FlowSystem {
    pub fn new(perm: &LogPermField, fluid: &FluidProps, rock: &RockProps, bc: &BoundarySpec, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("time step must be positive, got {dt}")));
        }
        let grid = perm.grid;
        let free = FreeCells::new(&grid, bc);
        let factor = fluid.conductivity_factor();
        let (kx, ky) = face_permeability(&grid, &perm.permeability());
        let storage = rock.specific_storage * grid.dx * grid.dy / dt;
        let mut matrix = CsrMatrix::with_capacity(free.cells.len(), 5 * free.cells.len());
        let mut boundary_rhs = vec![0.0; free.cells.len()];
        for (row, &cell) in free.cells.iter().enumerate() {
            let (i, j) = grid.coords(cell);
            let mut diag = storage;
            let mut entries = Vec::with_capacity(5);
            for (nb, face) in neighbours(&grid, i, j) {
                let t = factor
                    * match face {
                        Face::West => kx[j * (grid.nx + 1) + i] * grid.dy / grid.dx,
                        Face::East => kx[j * (grid.nx + 1) + i + 1] * grid.dy / grid.dx,
                        Face::South => ky[j * grid.nx + i] * grid.dx / grid.dy,
                        Face::North => ky[(j + 1) * grid.nx + i] * grid.dx / grid.dy,
                    };
                diag += t;
                match (free.unknown_of[nb], free.dirichlet[nb]) {
                    (Some(col), _) => entries.push((col, -t)),
                    (None, Some(value)) => boundary_rhs[row] += t * value,
                    (None, None) => unreachable!("cell is either free or prescribed"),
                }
            }
            entries.push((row, diag));
            matrix.push_row(entries);
        }
        Ok(FlowSystem { grid, free, matrix, storage, boundary_rhs, cholesky: OnceLock::new(), factor, kx, ky })
    }

    /// Darcy velocity of `head` for this system's permeability, written into
    /// `vel` (same as [`darcy_velocity`]).
    pub fn velocity_into(&self, head: &[f64], vel: &mut FaceVelocity) -> Result<()> {
        check_len(&self.grid, head)?;
        if vel.grid != self.grid {
            return Err(Error::invalid("velocity grid differs from the flow grid"));
        }
        fill_velocity(&self.grid, self.factor, &self.kx, &self.ky, head, vel);
        Ok(())
    }

    fn cholesky(&self) -> Result<&BandedCholesky> {
        if let Some(l) = self.cholesky.get() {
            return Ok(l);
        }
        let l = BandedCholesky::factor(&self.matrix)?;
        Ok(self.cholesky.get_or_init(|| l))
    }

    /// One implicit step from `head`, in place.
    pub fn step(&self, head: &mut [f64], settings: &SolverSettings) -> Result<()> {
        check_len(&self.grid, head)?;
        let rhs: Vec<f64> = self
            .free
            .cells
            .iter()
            .zip(&self.boundary_rhs)
            .map(|(&cell, b)| self.storage * head[cell] + b)
            .collect();
        let mut x: Vec<f64> = self.free.cells.iter().map(|&c| head[c]).collect();
        // Coefficients are head-independent, so the fixed-point loop settles on
        // its second pass; it stays so that head-dependent properties slot in.
        let cholesky = match settings.flow_solver {
            FlowSolver::BandedCholesky => Some(self.cholesky()?),
            FlowSolver::Bicgstab => None,
        };
        for _ in 0..MAX_PICARD_ITERATIONS {
            let previous = x.clone();
            match cholesky {
                Some(l) => {
                    // An exact solve of a head-independent system is already
                    // the fixed point.
                    x.copy_from_slice(&rhs);
                    l.solve(&mut x)?;
                    break;
                }
                None => {
                    bicgstab(&self.matrix, &rhs, &mut x, settings.linear_rel_tol, settings.linear_max_iter)?;
                }
            }
            let change = x.iter().zip(&previous).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let scale = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            if change <= settings.picard_rel_tol * scale {
                break;
            }
        }
        for (cell, d) in self.free.dirichlet.iter().enumerate() {
            if let Some(d) = d {
                head[cell] = *d;
            }
        }
        for (&cell, v) in self.free.cells.iter().zip(&x) {
            head[cell] = *v;
        }
        Ok(())
    }
}

/// Backward-Euler flow step `S_s (h' - h) / dt = div v(h')`.
pub fn step_flow(
    state: &DynamicState,
    perm: &LogPermField,
    fluid: &FluidProps,
    rock: &RockProps,
    bc: &BoundarySpec,
    dt: f64,
    settings: &SolverSettings,
) -> Result<DynamicState> {
    let system = FlowSystem::new(perm, fluid, rock, bc, dt)?;
    let mut next = state.clone();
    system.step(&mut next.head, settings)?;
    Ok(next)
}

/// Where a face coupling lands: an off-diagonal matrix entry or, for a
/// prescribed neighbour, the right-hand side.
#[derive(Clone, Copy, Debug)]
enum Target {
    Entry(usize),
    Fixed(f64),
}

#[derive(Clone, Copy, Debug)]
struct Link {
    face: Face,
    target: Target,
}

/// Backward-Euler upwind advection / isotropic diffusion operator for the
/// tracer. The sparsity pattern is fixed by the grid and boundary
/// conditions; values are refilled from the velocity at every step.
#[derive(Clone, Debug)]
pub struct TransportSystem {
    grid: Grid2D,
    free: FreeCells,
    matrix: CsrMatrix,
    link_ptr: Vec<usize>,
    links: Vec<Link>,
    diag_entry: Vec<usize>,
    storage: f64,
    diffusion: f64,
    ilu: Option<Ilu0>,
    solver: Bicgstab,
    rhs: Vec<f64>,
    x: Vec<f64>,
}

impl TransportSystem {
    pub fn new(grid: Grid2D, rock: &RockProps, bc: &BoundarySpec, diffusion: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("time step must be positive, got {dt}")));
        }
        if !(diffusion >= 0.0) {
            return Err(Error::invalid("diffusion coefficient must be non-negative"));
        }
        let free = FreeCells::new(&grid, bc);
        let n = free.cells.len();
        let mut matrix = CsrMatrix::with_capacity(n, 5 * n);
        let mut link_ptr = Vec::with_capacity(n + 1);
        let mut links = Vec::with_capacity(4 * n);
        let mut diag_entry = Vec::with_capacity(n);
        link_ptr.push(0);
        for (row, &cell) in free.cells.iter().enumerate() {
            let (i, j) = grid.coords(cell);
            let mut entries = Vec::with_capacity(5);
            for (nb, face) in neighbours(&grid, i, j) {
                let target = match (free.unknown_of[nb], free.dirichlet[nb]) {
                    (Some(col), _) => {
                        entries.push((col, 0.0));
                        Target::Entry(matrix.nnz() + entries.len() - 1)
                    }
                    (None, Some(value)) => Target::Fixed(value),
                    (None, None) => unreachable!("cell is either free or prescribed"),
                };
                links.push(Link { face, target });
            }
            entries.push((row, 0.0));
            diag_entry.push(matrix.nnz() + entries.len() - 1);
            matrix.push_row(entries);
            link_ptr.push(links.len());
        }
        Ok(TransportSystem {
            grid,
            free,
            matrix,
            link_ptr,
            links,
            diag_entry,
            storage: rock.porosity * grid.dx * grid.dy / dt,
            diffusion,
            ilu: None,
            solver: Bicgstab::new(n),
            rhs: vec![0.0; n],
            x: vec![0.0; n],
        })
    }

    fn assemble(&mut self, conc: &[f64], velocity: &FaceVelocity) {
        let grid = self.grid;
        let values = self.matrix.values_mut();
        for (row, &cell) in self.free.cells.iter().enumerate() {
            let (i, j) = grid.coords(cell);
            let mut diag = self.storage;
            let mut b = self.storage * conc[cell];
            for link in &self.links[self.link_ptr[row]..self.link_ptr[row + 1]] {
                // Darcy flux (per unit thickness) entering `cell` through this face.
                let (inflow, geom) = match link.face {
                    Face::West => (velocity.west(i, j) * grid.dy, grid.dy / grid.dx),
                    Face::East => (-velocity.west(i + 1, j) * grid.dy, grid.dy / grid.dx),
                    Face::South => (velocity.south(i, j) * grid.dx, grid.dx / grid.dy),
                    Face::North => (-velocity.south(i, j + 1) * grid.dx, grid.dx / grid.dy),
                };
                let coupling = self.diffusion * geom + inflow.max(0.0);
                diag += coupling;
                match link.target {
                    Target::Entry(e) => values[e] = -coupling,
                    Target::Fixed(value) => b += coupling * value,
                }
            }
            values[self.diag_entry[row]] = diag;
            self.rhs[row] = b;
        }
    }

    /// One implicit step of `conc` under `velocity`, in place.
    pub fn step(&mut self, conc: &mut [f64], velocity: &FaceVelocity, settings: &SolverSettings) -> Result<()> {
        check_len(&self.grid, conc)?;
        if velocity.grid != self.grid {
            return Err(Error::invalid("velocity grid differs from the transport grid"));
        }
        self.assemble(conc, velocity);
        for (x, &cell) in self.x.iter_mut().zip(&self.free.cells) {
            *x = conc[cell];
        }
        let (tol, max_iter) = (settings.linear_rel_tol, settings.linear_max_iter);
        match settings.transport_preconditioner {
            TransportPreconditioner::Ilu0 => {
                match self.ilu.as_mut() {
                    Some(ilu) => ilu.refactor(&self.matrix)?,
                    None => self.ilu = Some(Ilu0::new(&self.matrix)?),
                }
                let ilu = self.ilu.as_ref().expect("factored above");
                self.solver.solve(&self.matrix, ilu, &self.rhs, &mut self.x, tol, max_iter)?;
            }
            TransportPreconditioner::Jacobi => {
                let m = Jacobi::new(&self.matrix);
                self.solver.solve(&self.matrix, &m, &self.rhs, &mut self.x, tol, max_iter)?;
            }
        }
        for (cell, d) in self.free.dirichlet.iter().enumerate() {
            if let Some(d) = d {
                conc[cell] = *d;
            }
        }
        for (&cell, v) in self.free.cells.iter().zip(&self.x) {
            conc[cell] = *v;
        }
        Ok(())
    }
}

/// Single transport step; see [`TransportSystem`].
pub fn step_transport(
    conc: &[f64],
    velocity: &FaceVelocity,
    rock: &RockProps,
    bc: &BoundarySpec,
    diffusion: f64,
    dt: f64,
    settings: &SolverSettings,
) -> Result<Vec<f64>> {
    let mut system = TransportSystem::new(velocity.grid, rock, bc, diffusion, dt)?;
    let mut out = conc.to_vec();
    system.step(&mut out, velocity, settings)?;
    Ok(out)
}

/// Everything needed to advance one realization through time.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardModel {
    pub grid: Grid2D,
    pub fluid: FluidProps,
    pub rock: RockProps,
    pub head_bc: BoundarySpec,
    /// Present for tracer-transport models.
    pub conc_bc: Option<BoundarySpec>,
    pub diffusion: f64,
    pub dt: f64,
    pub settings: SolverSettings,
}

impl ForwardModel {
    /// Advances `state` by `n_steps` steps with fixed parameters.
    pub fn advance(&self, state: &DynamicState, perm: &LogPermField, n_steps: usize) -> Result<DynamicState> {
        let mut out = state.clone();
        self.advance_with(&mut out, perm, 0, n_steps, |_, _| {})?;
        Ok(out)
    }

    /// Advances in place, calling `observe(step, state)` after every step.
    /// `first_step` only labels steps in errors and callbacks.
    pub fn advance_with(
        &self,
        state: &mut DynamicState,
        perm: &LogPermField,
        first_step: usize,
        n_steps: usize,
        mut observe: impl FnMut(usize, &DynamicState),
    ) -> Result<()> {
        if n_steps == 0 {
            return Ok(());
        }
        let annotate = |step: usize| move |e: Error| Error::Forward { step, member: None, source: Box::new(e) };
        let flow = FlowSystem::new(perm, &self.fluid, &self.rock, &self.head_bc, self.dt).map_err(annotate(first_step))?;
        let mut transport = match (&self.conc_bc, &state.conc) {
            (Some(bc), Some(_)) => Some(
                TransportSystem::new(self.grid, &self.rock, bc, self.diffusion, self.dt).map_err(annotate(first_step))?,
            ),
            _ => None,
        };
        let mut vel = FaceVelocity::zeros(self.grid);
        for k in 0..n_steps {
            let step = first_step + k + 1;
            flow.step(&mut state.head, &self.settings).map_err(annotate(step))?;
            if let (Some(system), Some(conc)) = (transport.as_mut(), state.conc.as_mut()) {
                flow.velocity_into(&state.head, &mut vel).map_err(annotate(step))?;
                system.step(conc, &vel, &self.settings).map_err(annotate(step))?;
            }
            observe(step, state);
        }
        Ok(())
    }

    /// Number of whole steps between two times, which must lie on the step grid.
    pub fn steps_between(&self, t_from: f64, t_to: f64) -> Result<(usize, usize)> {
        let to_step = |t: f64| -> Result<usize> {
            let s = t / self.dt;
            let r = s.round();
            if t < 0.0 || (s - r).abs() > 1e-9 * r.max(1.0) {
                return Err(Error::invalid(format!("time {t} s is not on the {} s step grid", self.dt)));
            }
            Ok(r as usize)
        };
        let (a, b) = (to_step(t_from)?, to_step(t_to)?);
        if a > b {
            return Err(Error::invalid("t_from must not exceed t_to"));
        }
        Ok((a, b))
    }
}

/// States at every step boundary from `t_from` to `t_to` (inclusive of the
/// initial state). Parameters are left untouched.
pub fn run_forward(
    model: &ForwardModel,
    initial: &DynamicState,
    perm: &LogPermField,
    t_from: f64,
    t_to: f64,
) -> Result<Vec<DynamicState>> {
    let (a, b) = model.steps_between(t_from, t_to)?;
    let mut trajectory = Vec::with_capacity(b - a + 1);
    trajectory.push(initial.clone());
    let mut state = initial.clone();
    model.advance_with(&mut state, perm, a, b - a, |_, s| trajectory.push(s.clone()))?;
    Ok(trajectory)
}

/// Net and gross Darcy flux between prescribed-head cells and the free
/// domain. At steady state the net flux vanishes.
pub fn boundary_flux_balance(perm: &LogPermField, head: &[f64], fluid: &FluidProps, bc: &BoundarySpec) -> Result<(f64, f64)> {
    let grid = perm.grid;
    let vel = darcy_velocity(perm, head, fluid)?;
    let dirichlet = bc.dirichlet_values(&grid);
    let (mut net, mut gross) = (0.0, 0.0);
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let cell = grid.index(i, j);
            if dirichlet[cell].is_none() {
                continue;
            }
            for (nb, face) in neighbours(&grid, i, j) {
                if dirichlet[nb].is_some() {
                    continue;
                }
                // Flux leaving the prescribed cell into the free domain.
                let q = match face {
                    Face::West => -vel.west(i, j) * grid.dy,
                    Face::East => vel.west(i + 1, j) * grid.dy,
                    Face::South => -vel.south(i, j) * grid.dx,
                    Face::North => vel.south(i, j + 1) * grid.dx,
                };
                net += q;
                gross += q.abs();
            }
        }
    }
    Ok((net, gross))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn column(k_log: f64) -> (Grid2D, LogPermField) {
        let g = Grid2D::new(3, 31, 2.0, 2.0).unwrap();
        (g, LogPermField::constant(g, k_log))
    }

    fn rock() -> RockProps {
        RockProps { porosity: 0.1, specific_storage: 1e-5 }
    }

    fn south_north(south: f64, north: f64) -> BoundarySpec {
        BoundarySpec {
            south: EdgeCondition::Dirichlet { value: south },
            north: EdgeCondition::Dirichlet { value: north },
            west: EdgeCondition::NoFlow,
            east: EdgeCondition::NoFlow,
            fixed_cells: vec![],
        }
    }

    #[test]
    fn uniform_head_has_no_flow() {
        let (g, perm) = column(-12.0);
        let v = darcy_velocity(&perm, &vec![10.0; g.n_cells()], &FluidProps::default()).unwrap();
        assert!(v.vx.iter().chain(&v.vy).all(|x| *x == 0.0));
    }

    #[test]
    fn darcy_matches_hand_value() {
        // Gradient of 1 m over 62 m in a uniform 1e-12 m^2 column.
        let (g, perm) = column(-12.0);
        let head: Vec<f64> = (0..g.n_cells()).map(|c| 11.0 - g.center(c).1 / 62.0).collect();
        let v = darcy_velocity(&perm, &head, &FluidProps::default()).unwrap();
        let expected = 9.81e6 * 1e-12 / 62.0;
        assert_relative_eq!(v.south(1, 10), expected, max_relative = 1e-12);
        assert_relative_eq!(expected, 1.582e-7, max_relative = 1e-3);
        assert_eq!(v.south(1, 0), 0.0);
        assert_eq!(v.west(0, 3), 0.0);
    }

    #[test]
    fn harmonic_face_permeability() {
        assert_relative_eq!(harmonic_mean(1e-12, 1e-14), 2.0 / (1e12 + 1e14), max_relative = 1e-14);
        assert_relative_eq!(harmonic_mean(1e-12, 1e-14), 1.980e-14, max_relative = 1e-3);
    }

    #[test]
    fn dirichlet_only_problem_is_stationary() {
        let g = Grid2D::new(8, 8, 2.0, 2.0).unwrap();
        let perm = LogPermField::constant(g, -12.0);
        let bc = BoundarySpec::uniform(EdgeCondition::Dirichlet { value: 10.0 });
        let state = DynamicState { head: vec![10.0; g.n_cells()], conc: None };
        let next =
            step_flow(&state, &perm, &FluidProps::default(), &rock(), &bc, 3600.0, &SolverSettings::default()).unwrap();
        for h in &next.head {
            assert_relative_eq!(*h, 10.0, max_relative = 1e-13);
        }
        let iterative = SolverSettings { flow_solver: FlowSolver::Bicgstab, ..SolverSettings::default() };
        let next = step_flow(&state, &perm, &FluidProps::default(), &rock(), &bc, 3600.0, &iterative).unwrap();
        assert_eq!(next, state);
    }

    #[test]
    fn steady_column_is_linear() {
        let (g, perm) = column(-12.0);
        let bc = south_north(11.0, 10.0);
        let mut state = DynamicState { head: vec![10.0; g.n_cells()], conc: None };
        bc.apply(&g, &mut state.head);
        for _ in 0..3 {
            state =
                step_flow(&state, &perm, &FluidProps::default(), &rock(), &bc, 518_400.0, &SolverSettings::default())
                    .unwrap();
        }
        for c in 0..g.n_cells() {
            let y = g.center(c).1;
            let exact = 11.0 - (y - 1.0) / 60.0;
            assert!((state.head[c] - exact).abs() < 1e-8, "cell {c}: {} vs {exact}", state.head[c]);
        }
    }

    #[test]
    fn transport_without_flow_or_diffusion_is_identity() {
        let g = Grid2D::new(6, 6, 2.0, 2.0).unwrap();
        let conc: Vec<f64> = (0..g.n_cells()).map(|c| 0.06 + 1e-3 * (c % 7) as f64).collect();
        let bc = BoundarySpec::uniform(EdgeCondition::NoFlow);
        let out = step_transport(&conc, &FaceVelocity::zeros(g), &rock(), &bc, 0.0, 1e5, &SolverSettings::default())
            .unwrap();
        for (a, b) in out.iter().zip(&conc) {
            assert_relative_eq!(a, b, max_relative = 1e-13);
        }
    }

    #[test]
    fn uniform_concentration_stays_uniform() {
        let (g, perm) = column(-12.0);
        let bc = south_north(11.0, 10.0);
        let mut head = vec![10.5; g.n_cells()];
        bc.apply(&g, &mut head);
        let vel = darcy_velocity(&perm, &head, &FluidProps::default()).unwrap();
        let cbc = south_north(0.06, 0.06);
        let conc = vec![0.06; g.n_cells()];
        let out = step_transport(&conc, &vel, &rock(), &cbc, 1.5e-9, 518_400.0, &SolverSettings::default()).unwrap();
        for v in out {
            assert_relative_eq!(v, 0.06, max_relative = 1e-12);
        }
    }

    #[test]
    fn trajectory_bookkeeping() {
        let (g, perm) = column(-12.0);
        let model = ForwardModel {
            grid: g,
            fluid: FluidProps::default(),
            rock: rock(),
            head_bc: south_north(11.0, 10.0),
            conc_bc: Some(south_north(0.08, 0.06)),
            diffusion: 1.5e-9,
            dt: 518_400.0,
            settings: SolverSettings::default(),
        };
        let init = DynamicState { head: vec![10.0; g.n_cells()], conc: Some(vec![0.06; g.n_cells()]) };
        assert_eq!(run_forward(&model, &init, &perm, 0.0, 0.0).unwrap(), vec![init.clone()]);
        let traj = run_forward(&model, &init, &perm, 0.0, 3.0 * 518_400.0).unwrap();
        assert_eq!(traj.len(), 4);
        assert!(run_forward(&model, &init, &perm, 0.0, 1000.0).is_err());
    }
}
