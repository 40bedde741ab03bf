//! Semi-discrete operator: split-form volume terms, surface fluxes, BR1
//! gradients, dissipative fluxes, and the sub-cell DG/FV blend.
//!
//! Element nodes are stored with `k = i + j * n1d`, `i` along x.

use rayon::prelude::*;

use crate::basis::OperatorSet;
use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::gas::{
    ec_flux_axis, es_flux_aux, guermond_popov_flux, viscous_flux, BlockFlux, FluxAux, GasModel,
    Primitive, State,
};
use crate::mesh::{CartesianMesh, Neighbor, Side};

/// Largest supported nodes-per-direction; fixes stack buffer sizes in the kernels.
pub const MAX_N1D: usize = 16;

const ZERO: State = [0.0; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct ConservativeField {
    nodes_per_element: usize,
    data: Vec<State>,
}

impl ConservativeField {
    pub fn zeros(num_elements: usize, nodes_per_element: usize) -> Self {
        ConservativeField {
            nodes_per_element,
            data: vec![ZERO; num_elements * nodes_per_element],
        }
    }

    pub fn from_vec(nodes_per_element: usize, data: Vec<State>) -> Result<Self> {
        if nodes_per_element == 0 || data.len() % nodes_per_element != 0 {
            return Err(Error::Layout(format!(
                "{} nodes do not split into elements of {}",
                data.len(),
                nodes_per_element
            )));
        }
        Ok(ConservativeField {
            nodes_per_element,
            data,
        })
    }

    pub fn nodes_per_element(&self) -> usize {
        self.nodes_per_element
    }

    pub fn num_elements(&self) -> usize {
        self.data.len() / self.nodes_per_element
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn element(&self, e: usize) -> &[State] {
        let n = self.nodes_per_element;
        &self.data[e * n..(e + 1) * n]
    }

    pub fn element_mut(&mut self, e: usize) -> &mut [State] {
        let n = self.nodes_per_element;
        &mut self.data[e * n..(e + 1) * n]
    }

    pub fn nodes(&self) -> &[State] {
        &self.data
    }

    pub fn nodes_mut(&mut self) -> &mut [State] {
        &mut self.data
    }

    pub fn as_flat(&self) -> &[f64] {
        self.data.as_flattened()
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        self.data.as_flattened_mut()
    }

    pub fn into_vec(self) -> Vec<State> {
        self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurfaceFlux {
    /// Entropy-conservative flux plus local Lax-Friedrichs dissipation.
    #[default]
    EntropyStable,
    /// Entropy-conservative flux only; used for entropy audits.
    EntropyConservative,
}

#[derive(Debug, Clone)]
pub struct Discretization {
    mesh: CartesianMesh,
    ops: OperatorSet,
    gas: GasModel,
    boundaries: BoundarySet,
    surface_flux: SurfaceFlux,
    viscosity: f64,
    d2: Vec<f64>,
    coords: Vec<[f64; 2]>,
}

impl Discretization {
    pub fn new(
        mesh: CartesianMesh,
        ops: OperatorSet,
        gas: GasModel,
        boundaries: BoundarySet,
    ) -> Result<Self> {
        gas.validate()?;
        let n1d = ops.n1d();
        if n1d > MAX_N1D {
            return Err(Error::InvalidOrder(ops.order()));
        }
        if boundaries.periodicity()? != mesh.periodic() {
            return Err(Error::Config(
                "periodic boundary flags disagree with mesh periodicity".into(),
            ));
        }
        let d = ops.derivative();
        let d2 = (0..n1d * n1d)
            .map(|idx| 2.0 * d.get(idx / n1d, idx % n1d))
            .collect();
        let xi = ops.nodes();
        let mut coords = Vec::with_capacity(mesh.num_elements() * n1d * n1d);
        for e in 0..mesh.num_elements() {
            for j in 0..n1d {
                for i in 0..n1d {
                    coords.push(mesh.map_point(e, xi[i], xi[j]));
                }
            }
        }
        Ok(Discretization {
            mesh,
            ops,
            gas,
            boundaries,
            surface_flux: SurfaceFlux::default(),
            viscosity: 0.0,
            d2,
            coords,
        })
    }

    pub fn with_surface_flux(mut self, flux: SurfaceFlux) -> Self {
        self.surface_flux = flux;
        self
    }

    /// Constant physical viscosity; zero gives the Euler equations.
    pub fn with_viscosity(mut self, mu: f64) -> Self {
        self.viscosity = mu;
        self
    }

    pub fn mesh(&self) -> &CartesianMesh {
        &self.mesh
    }

    pub fn ops(&self) -> &OperatorSet {
        &self.ops
    }

    pub fn gas(&self) -> &GasModel {
        &self.gas
    }

    pub fn boundaries(&self) -> &BoundarySet {
        &self.boundaries
    }

    pub fn viscosity(&self) -> f64 {
        self.viscosity
    }

    pub fn n1d(&self) -> usize {
        self.ops.n1d()
    }

    pub fn nodes_per_element(&self) -> usize {
        self.n1d() * self.n1d()
    }

    pub fn num_nodes(&self) -> usize {
        self.mesh.num_elements() * self.nodes_per_element()
    }

    /// Physical coordinates of every node in storage order.
    pub fn coordinates(&self) -> &[[f64; 2]] {
        &self.coords
    }

    /// Quadrature weight times Jacobian for node `k` of any element.
    pub fn mass_weight(&self, k: usize) -> f64 {
        let n = self.n1d();
        let w = self.ops.weights();
        w[k % n] * w[k / n] * self.mesh.jacobian()
    }

    /// Samples `f(x, y)` at every node.
    pub fn project(&self, f: impl Fn(f64, f64) -> State) -> ConservativeField {
        let data = self.coords.iter().map(|&[x, y]| f(x, y)).collect();
        ConservativeField {
            nodes_per_element: self.nodes_per_element(),
            data,
        }
    }

    /// Domain integral of each conserved variable.
    pub fn integrate(&self, field: &ConservativeField) -> State {
        let npe = self.nodes_per_element();
        let mut total = ZERO;
        for (idx, q) in field.nodes().iter().enumerate() {
            let w = self.mass_weight(idx % npe);
            for c in 0..4 {
                total[c] += w * q[c];
            }
        }
        total
    }

    pub fn check_layout(&self, field: &ConservativeField) -> Result<()> {
        if field.nodes_per_element() != self.nodes_per_element()
            || field.num_elements() != self.mesh.num_elements()
        {
            return Err(Error::Layout(format!(
                "field has {} elements of {} nodes, discretization expects {} of {}",
                field.num_elements(),
                field.nodes_per_element(),
                self.mesh.num_elements(),
                self.nodes_per_element()
            )));
        }
        Ok(())
    }

    fn aux(&self, field: &ConservativeField, t: f64) -> Result<Vec<FluxAux>> {
        let npe = self.nodes_per_element();
        field
            .nodes()
            .par_iter()
            .enumerate()
            .map(|(idx, q)| FluxAux::new(q, &self.gas).map_err(|err| err.at_element(idx / npe, t)))
            .collect()
    }
}

/// Per-element artificial-viscosity coefficients `(alpha_a, mu_a)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ArtificialCoefficients {
    pub alpha: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum Stabilization<'a> {
    None,
    Blending(&'a BlendCoefficients),
    Viscosity(&'a [ArtificialCoefficients]),
}

/// Trace states on both sides of every face point.
struct Traces {
    /// `(minus, plus)` states per x-face point, index `face * n1d + j`.
    x: Vec<(State, State)>,
    y: Vec<(State, State)>,
}

fn element_trace_state(field: &ConservativeField, e: usize, k: usize) -> State {
    field.element(e)[k]
}

fn compute_traces(disc: &Discretization, field: &ConservativeField, t: f64) -> Result<Traces> {
    let mesh = &disc.mesh;
    let n = disc.n1d();
    let last = n - 1;
    let gas = &disc.gas;
    let coords = &disc.coords;
    let npe = disc.nodes_per_element();

    let ghost = |side: Side, e: usize, k: usize| -> Result<State> {
        let q = element_trace_state(field, e, k);
        disc.boundaries
            .side(side)
            .exterior(&q, side.normal(), coords[e * npe + k], t, gas)
            .map_err(|err| err.at_element(e, t))
    };

    let fpr = mesh.x_faces_per_row();
    let mut x = vec![(ZERO, ZERO); fpr * mesh.ny() * n];
    x.par_chunks_mut(n).enumerate().try_for_each(|(f, out)| -> Result<()> {
        let (i, iy) = (f % fpr, f / fpr);
        let (minus, plus) = mesh.x_face_owners(i, iy);
        for (j, slot) in out.iter_mut().enumerate() {
            let kl = last + j * n;
            let kr = j * n;
            *slot = match (minus, plus) {
                (Neighbor::Element(a), Neighbor::Element(b)) => (
                    element_trace_state(field, a, kl),
                    element_trace_state(field, b, kr),
                ),
                (Neighbor::Boundary(side), Neighbor::Element(b)) => {
                    (ghost(side, b, kr)?, element_trace_state(field, b, kr))
                }
                (Neighbor::Element(a), Neighbor::Boundary(side)) => {
                    (element_trace_state(field, a, kl), ghost(side, a, kl)?)
                }
                _ => unreachable!("face without an owning element"),
            };
        }
        Ok(())
    })?;

    let fpc = mesh.y_faces_per_column();
    let mut y = vec![(ZERO, ZERO); fpc * mesh.nx() * n];
    y.par_chunks_mut(n).enumerate().try_for_each(|(f, out)| -> Result<()> {
        let (j, ix) = (f % fpc, f / fpc);
        let (minus, plus) = mesh.y_face_owners(ix, j);
        for (i, slot) in out.iter_mut().enumerate() {
            let kl = i + last * n;
            let kr = i;
            *slot = match (minus, plus) {
                (Neighbor::Element(a), Neighbor::Element(b)) => (
                    element_trace_state(field, a, kl),
                    element_trace_state(field, b, kr),
                ),
                (Neighbor::Boundary(side), Neighbor::Element(b)) => {
                    (ghost(side, b, kr)?, element_trace_state(field, b, kr))
                }
                (Neighbor::Element(a), Neighbor::Boundary(side)) => {
                    (element_trace_state(field, a, kl), ghost(side, a, kl)?)
                }
                _ => unreachable!("face without an owning element"),
            };
        }
        Ok(())
    })?;
    Ok(Traces { x, y })
}

fn face_fluxes(
    disc: &Discretization,
    traces: &[(State, State)],
    normal: [f64; 2],
    n1d: usize,
    t: f64,
) -> Result<Vec<State>> {
    let gas = &disc.gas;
    let mesh = &disc.mesh;
    traces
        .par_iter()
        .enumerate()
        .map(|(idx, (ql, qr))| {
            let l = FluxAux::new(ql, gas);
            let r = FluxAux::new(qr, gas);
            match (l, r) {
                (Ok(l), Ok(r)) => Ok(match disc.surface_flux {
                    SurfaceFlux::EntropyStable => es_flux_aux(ql, qr, &l, &r, normal, gas),
                    SurfaceFlux::EntropyConservative => {
                        let axis = usize::from(normal[1] != 0.0);
                        ec_flux_axis(&l, &r, axis, gas.gamma)
                    }
                }),
                (Err(err), _) | (_, Err(err)) => {
                    // Report an owning element for the diagnostic.
                    let face = idx / n1d;
                    let e = if normal[0] != 0.0 {
                        let fpr = mesh.x_faces_per_row();
                        mesh.element((face % fpr).min(mesh.nx() - 1), face / fpr)
                    } else {
                        let fpc = mesh.y_faces_per_column();
                        mesh.element(face / fpc, (face % fpc).min(mesh.ny() - 1))
                    };
                    Err(err.at_element(e, t))
                }
            }
        })
        .collect()
}

/// Split-form volume contribution along one line, in reference coordinates:
/// `acc[i] += sum_k 2 D_ik F#(q_i, q_k)`, written in difference form so a
/// uniform line yields exactly zero.
#[inline]
fn splitform_line(aux: &[FluxAux], idx: &[usize], d2: &[f64], axis: usize, gamma: f64, acc: &mut [State]) {
    let n = idx.len();
    let mut point = [ZERO; MAX_N1D];
    for i in 0..n {
        let a = &aux[idx[i]];
        point[i] = ec_flux_axis(a, a, axis, gamma);
    }
    for i in 0..n {
        for k in (i + 1)..n {
            let f = ec_flux_axis(&aux[idx[i]], &aux[idx[k]], axis, gamma);
            let dik = d2[i * n + k];
            let dki = d2[k * n + i];
            for c in 0..4 {
                acc[i][c] += dik * (f[c] - point[i][c]);
                acc[k][c] += dki * (f[c] - point[k][c]);
            }
        }
    }
}

/// Interface fluxes `f_(m-1,m)`, `m = 0..=n`, reproducing the split-form line
/// operator by telescoping.
#[inline]
fn dg_subcell_line(
    aux: &[FluxAux],
    idx: &[usize],
    d2: &[f64],
    weights: &[f64],
    axis: usize,
    gamma: f64,
    out: &mut [State],
) {
    let n = idx.len();
    let mut pair = [[ZERO; MAX_N1D]; MAX_N1D];
    for l in 0..n {
        for k in l..n {
            pair[l][k] = ec_flux_axis(&aux[idx[l]], &aux[idx[k]], axis, gamma);
        }
    }
    out[0] = pair[0][0];
    out[n] = pair[n - 1][n - 1];
    for m in 1..n {
        let i = m - 1;
        let reference = pair[i][i];
        let mut f = reference;
        for k in m..n {
            for l in 0..m {
                let c2 = weights[l] * d2[l * n + k];
                for c in 0..4 {
                    f[c] += c2 * (pair[l][k][c] - reference[c]);
                }
            }
        }
        out[m] = f;
    }
}

#[inline]
fn fv_subcell_line(q: &[State], aux: &[FluxAux], idx: &[usize], axis: usize, gas: &GasModel, out: &mut [State]) {
    let n = idx.len();
    let normal = if axis == 0 { [1.0, 0.0] } else { [0.0, 1.0] };
    let first = &aux[idx[0]];
    let lastn = &aux[idx[n - 1]];
    out[0] = ec_flux_axis(first, first, axis, gas.gamma);
    out[n] = ec_flux_axis(lastn, lastn, axis, gas.gamma);
    for m in 1..n {
        let (a, b) = (idx[m - 1], idx[m]);
        out[m] = es_flux_aux(&q[a], &q[b], &aux[a], &aux[b], normal, gas);
    }
}

fn line_indices(n: usize, line: usize, axis: usize) -> [usize; MAX_N1D] {
    let mut idx = [0usize; MAX_N1D];
    for (m, slot) in idx.iter_mut().enumerate().take(n) {
        *slot = if axis == 0 { m + line * n } else { line + m * n };
    }
    idx
}

/// Sub-cell interface fluxes of one element. Each direction holds `n1d` lines of
/// `n1d + 1` interfaces; interface `m` separates nodes `m - 1` and `m`, with
/// `m = 0` and `m = n1d` on the element faces.
#[derive(Debug, Clone, PartialEq)]
pub struct SubcellFluxSet {
    n1d: usize,
    pub x: Vec<State>,
    pub y: Vec<State>,
}

impl SubcellFluxSet {
    fn zeros(n1d: usize) -> Self {
        SubcellFluxSet {
            n1d,
            x: vec![ZERO; n1d * (n1d + 1)],
            y: vec![ZERO; n1d * (n1d + 1)],
        }
    }

    pub fn n1d(&self) -> usize {
        self.n1d
    }

    /// Interface flux `m` of line `line` along `axis`.
    pub fn get(&self, axis: usize, line: usize, m: usize) -> State {
        let data = if axis == 0 { &self.x } else { &self.y };
        data[line * (self.n1d + 1) + m]
    }

    /// Reference-space divergence `(f_(i,i+1) - f_(i-1,i)) / w_i` in physical
    /// scaling, one entry per node.
    pub fn divergence(&self, weights: &[f64], scale: [f64; 2]) -> Vec<State> {
        let n = self.n1d;
        let mut out = vec![ZERO; n * n];
        for line in 0..n {
            for i in 0..n {
                let fx0 = self.get(0, line, i);
                let fx1 = self.get(0, line, i + 1);
                let fy0 = self.get(1, line, i);
                let fy1 = self.get(1, line, i + 1);
                let kx = i + line * n;
                let ky = line + i * n;
                for c in 0..4 {
                    out[kx][c] += scale[0] * (fx1[c] - fx0[c]) / weights[i];
                    out[ky][c] += scale[1] * (fy1[c] - fy0[c]) / weights[i];
                }
            }
        }
        out
    }
}

fn element_aux(disc: &Discretization, element: &[State]) -> Result<Vec<FluxAux>> {
    if element.len() != disc.nodes_per_element() {
        return Err(Error::Layout(format!(
            "element has {} nodes, expected {}",
            element.len(),
            disc.nodes_per_element()
        )));
    }
    element.iter().map(|q| FluxAux::new(q, &disc.gas)).collect()
}

fn metric_scale(disc: &Discretization) -> [f64; 2] {
    [2.0 / disc.mesh.dx(), 2.0 / disc.mesh.dy()]
}

/// Split-form volume divergence `sum_d (2/h_d) sum_k 2 D_ik F#` of one element,
/// without surface terms.
pub fn volume_splitform(disc: &Discretization, element: &[State]) -> Result<Vec<State>> {
    let aux = element_aux(disc, element)?;
    let n = disc.n1d();
    let scale = metric_scale(disc);
    let mut out = vec![ZERO; n * n];
    for axis in 0..2 {
        for line in 0..n {
            let idx = line_indices(n, line, axis);
            let mut acc = [ZERO; MAX_N1D];
            splitform_line(&aux, &idx[..n], &disc.d2, axis, disc.gas.gamma, &mut acc);
            for m in 0..n {
                for c in 0..4 {
                    out[idx[m]][c] += scale[axis] * acc[m][c];
                }
            }
        }
    }
    Ok(out)
}

pub fn subcell_dg_fluxes(disc: &Discretization, element: &[State]) -> Result<SubcellFluxSet> {
    let aux = element_aux(disc, element)?;
    let n = disc.n1d();
    let mut set = SubcellFluxSet::zeros(n);
    for axis in 0..2 {
        for line in 0..n {
            let idx = line_indices(n, line, axis);
            let dst = if axis == 0 { &mut set.x } else { &mut set.y };
            dg_subcell_line(
                &aux,
                &idx[..n],
                &disc.d2,
                disc.ops.weights(),
                axis,
                disc.gas.gamma,
                &mut dst[line * (n + 1)..(line + 1) * (n + 1)],
            );
        }
    }
    Ok(set)
}

/// Low-order fluxes: the entropy-stable Riemann solver between adjacent nodes.
pub fn subcell_fv_fluxes(disc: &Discretization, element: &[State]) -> Result<SubcellFluxSet> {
    let aux = element_aux(disc, element)?;
    let n = disc.n1d();
    let mut set = SubcellFluxSet::zeros(n);
    for axis in 0..2 {
        for line in 0..n {
            let idx = line_indices(n, line, axis);
            let dst = if axis == 0 { &mut set.x } else { &mut set.y };
            fv_subcell_line(
                element,
                &aux,
                &idx[..n],
                axis,
                &disc.gas,
                &mut dst[line * (n + 1)..(line + 1) * (n + 1)],
            );
        }
    }
    Ok(set)
}

/// `(1 - alpha) dg + alpha fv` per interface, with `alpha_x`/`alpha_y` laid out
/// like the flux sets.
pub fn blend_subcell_fluxes(
    dg: &SubcellFluxSet,
    fv: &SubcellFluxSet,
    alpha_x: &[f64],
    alpha_y: &[f64],
) -> Result<SubcellFluxSet> {
    let len = dg.x.len();
    if dg.n1d != fv.n1d || alpha_x.len() != len || alpha_y.len() != len {
        return Err(Error::Layout(format!(
            "sub-cell blend needs {} coefficients per direction for order {}, got {} and {}",
            len,
            dg.n1d.saturating_sub(1),
            alpha_x.len(),
            alpha_y.len()
        )));
    }
    let mix = |a: &[State], b: &[State], alpha: &[f64]| -> Vec<State> {
        a.iter()
            .zip(b)
            .zip(alpha)
            .map(|((fa, fb), &s)| {
                let mut out = *fa;
                for c in 0..4 {
                    out[c] += s * (fb[c] - fa[c]);
                }
                out
            })
            .collect()
    };
    Ok(SubcellFluxSet {
        n1d: dg.n1d,
        x: mix(&dg.x, &fv.x, alpha_x),
        y: mix(&dg.y, &fv.y, alpha_y),
    })
}

/// Sub-cell blending coefficients for every element, laid out like
/// [`SubcellFluxSet`] per element.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendCoefficients {
    n1d: usize,
    alpha_max: f64,
    x: Vec<f64>,
    y: Vec<f64>,
    active: Vec<bool>,
}

impl BlendCoefficients {
    pub fn zeros(num_elements: usize, n1d: usize, alpha_max: f64) -> Self {
        let per = n1d * (n1d + 1);
        BlendCoefficients {
            n1d,
            alpha_max,
            x: vec![0.0; num_elements * per],
            y: vec![0.0; num_elements * per],
            active: vec![false; num_elements],
        }
    }

    /// Same coefficient on every interface, clamped to `alpha_max`.
    pub fn constant(num_elements: usize, n1d: usize, alpha: f64, alpha_max: f64) -> Self {
        let mut out = Self::zeros(num_elements, n1d, alpha_max);
        let a = alpha.clamp(0.0, alpha_max);
        out.x.fill(a);
        out.y.fill(a);
        out.active.fill(a > 0.0);
        out
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    pub fn num_elements(&self) -> usize {
        self.active.len()
    }

    pub fn element_x(&self, e: usize) -> &[f64] {
        let per = self.n1d * (self.n1d + 1);
        &self.x[e * per..(e + 1) * per]
    }

    pub fn element_y(&self, e: usize) -> &[f64] {
        let per = self.n1d * (self.n1d + 1);
        &self.y[e * per..(e + 1) * per]
    }

    pub fn is_active(&self, e: usize) -> bool {
        self.active[e]
    }

    pub fn max(&self) -> f64 {
        self.x.iter().chain(&self.y).copied().fold(0.0, f64::max)
    }

    /// Per-node value for output: the largest coefficient on the node's interfaces.
    pub fn nodal_max(&self) -> Vec<f64> {
        let n = self.n1d;
        let per = n * (n + 1);
        let mut out = vec![0.0; self.active.len() * n * n];
        for e in 0..self.active.len() {
            for line in 0..n {
                for i in 0..n {
                    let base = e * per + line * (n + 1);
                    let ax = self.x[base + i].max(self.x[base + i + 1]);
                    let ay = self.y[base + i].max(self.y[base + i + 1]);
                    let kx = e * n * n + i + line * n;
                    let ky = e * n * n + line + i * n;
                    out[kx] = f64::max(out[kx], ax);
                    out[ky] = f64::max(out[ky], ay);
                }
            }
        }
        out
    }
}

/// `alpha_(i,i+1) = min(alpha_max, max(s_i, s_(i+1)))`; face interfaces pair the
/// face node with its neighbour across the face (or itself on a boundary).
pub fn alpha_from_nodal_sensor(
    disc: &Discretization,
    nodal: &[f64],
    alpha_max: f64,
) -> Result<BlendCoefficients> {
    let mesh = &disc.mesh;
    let n = disc.n1d();
    let npe = n * n;
    if nodal.len() != mesh.num_elements() * npe {
        return Err(Error::Layout(format!(
            "sensor has {} values, mesh has {} nodes",
            nodal.len(),
            mesh.num_elements() * npe
        )));
    }
    let mut out = BlendCoefficients::zeros(mesh.num_elements(), n, alpha_max);
    let per = n * (n + 1);
    let s = |e: usize, k: usize| nodal[e * npe + k];
    for e in 0..mesh.num_elements() {
        let across = |side: Side, k_self: usize, k_other: usize| match mesh.neighbor(e, side) {
            Neighbor::Element(o) => s(o, k_other),
            Neighbor::Boundary(_) => s(e, k_self),
        };
        let mut any = false;
        for line in 0..n {
            for m in 0..=n {
                // x-direction, row `line`
                let left = if m == 0 {
                    across(Side::West, line * n, (n - 1) + line * n)
                } else {
                    s(e, (m - 1) + line * n)
                };
                let right = if m == n {
                    across(Side::East, (n - 1) + line * n, line * n)
                } else {
                    s(e, m + line * n)
                };
                let ax = left.max(right).clamp(0.0, alpha_max);
                // y-direction, column `line`
                let below = if m == 0 {
                    across(Side::South, line, line + (n - 1) * n)
                } else {
                    s(e, line + (m - 1) * n)
                };
                let above = if m == n {
                    across(Side::North, line + (n - 1) * n, line)
                } else {
                    s(e, line + m * n)
                };
                let ay = below.max(above).clamp(0.0, alpha_max);
                out.x[e * per + line * (n + 1) + m] = ax;
                out.y[e * per + line * (n + 1) + m] = ay;
                any |= ax > 0.0 || ay > 0.0;
            }
        }
        out.active[e] = any;
    }
    Ok(out)
}

/// Entropy-variable gradients at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub entropy: Vec<State>,
    pub dx: Vec<State>,
    pub dy: Vec<State>,
}

fn entropy_from_aux(a: &FluxAux, gamma: f64) -> State {
    let b = 2.0 * a.beta;
    let s = (1.0 - gamma) * a.ln_rho - std::f64::consts::LN_2 - a.ln_beta;
    [
        (gamma - s) / (gamma - 1.0) - 0.5 * b * a.vel2,
        b * a.u,
        b * a.v,
        -b,
    ]
}

fn trace_entropy(traces: &[(State, State)], gas: &GasModel) -> Vec<(State, State)> {
    traces
        .par_iter()
        .map(|(l, r)| {
            let wl = FluxAux::new(l, gas).map(|a| entropy_from_aux(&a, gas.gamma));
            let wr = FluxAux::new(r, gas).map(|a| entropy_from_aux(&a, gas.gamma));
            // Traces were validated when the surface fluxes were formed.
            (wl.unwrap_or(ZERO), wr.unwrap_or(ZERO))
        })
        .collect()
}

/// Face-adjacent data for one element in the order west, east, south, north.
fn element_faces(mesh: &CartesianMesh, e: usize) -> [usize; 4] {
    [
        mesh.x_face_of(e, false),
        mesh.x_face_of(e, true),
        mesh.y_face_of(e, false),
        mesh.y_face_of(e, true),
    ]
}

fn br1_gradients(
    disc: &Discretization,
    w: &[State],
    wx: &[(State, State)],
    wy: &[(State, State)],
) -> (Vec<State>, Vec<State>) {
    let n = disc.n1d();
    let npe = n * n;
    let mesh = &disc.mesh;
    let wts = disc.ops.weights();
    let d = disc.ops.derivative();
    let scale = metric_scale(disc);
    let mut gx = vec![ZERO; w.len()];
    let mut gy = vec![ZERO; w.len()];
    gx.par_chunks_mut(npe)
        .zip(gy.par_chunks_mut(npe))
        .enumerate()
        .for_each(|(e, (gxe, gye))| {
            let we = &w[e * npe..(e + 1) * npe];
            let [fw, fe, fs, fn_] = element_faces(mesh, e);
            for line in 0..n {
                for i in 0..n {
                    let kx = i + line * n;
                    let ky = line + i * n;
                    let mut ax = ZERO;
                    let mut ay = ZERO;
                    for m in 0..n {
                        let dim = d.get(i, m);
                        let qx = &we[m + line * n];
                        let qy = &we[line + m * n];
                        for c in 0..4 {
                            ax[c] += dim * (qx[c] - we[kx][c]);
                            ay[c] += dim * (qy[c] - we[ky][c]);
                        }
                    }
                    if i == 0 {
                        let (l, r) = &wx[fw * n + line];
                        let (b, t) = &wy[fs * n + line];
                        for c in 0..4 {
                            ax[c] -= (0.5 * (l[c] + r[c]) - we[kx][c]) / wts[0];
                            ay[c] -= (0.5 * (b[c] + t[c]) - we[ky][c]) / wts[0];
                        }
                    }
                    if i == n - 1 {
                        let (l, r) = &wx[fe * n + line];
                        let (b, t) = &wy[fn_ * n + line];
                        for c in 0..4 {
                            ax[c] += (0.5 * (l[c] + r[c]) - we[kx][c]) / wts[n - 1];
                            ay[c] += (0.5 * (b[c] + t[c]) - we[ky][c]) / wts[n - 1];
                        }
                    }
                    for c in 0..4 {
                        gxe[kx][c] = scale[0] * ax[c];
                        gye[ky][c] = scale[1] * ay[c];
                    }
                }
            }
        });
    (gx, gy)
}

/// BR1 lifted gradients of the entropy variables with central face values.
pub fn compute_gradients_br1(
    disc: &Discretization,
    field: &ConservativeField,
    t: f64,
) -> Result<GradientField> {
    disc.check_layout(field)?;
    let aux = disc.aux(field, t)?;
    let traces = compute_traces(disc, field, t)?;
    Ok(gradients_from_aux(disc, &aux, &traces))
}

fn gradients_from_aux(disc: &Discretization, aux: &[FluxAux], traces: &Traces) -> GradientField {
    let gamma = disc.gas.gamma;
    let w: Vec<State> = aux.par_iter().map(|a| entropy_from_aux(a, gamma)).collect();
    let wx = trace_entropy(&traces.x, &disc.gas);
    let wy = trace_entropy(&traces.y, &disc.gas);
    let (dx, dy) = br1_gradients(disc, &w, &wx, &wy);
    GradientField { entropy: w, dx, dy }
}

/// Gradients of primitive quantities at one node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PrimitiveGradient {
    pub rho: [f64; 2],
    /// `vel[i][j] = d v_i / d x_j`
    pub vel: [[f64; 2]; 2],
    pub p: [f64; 2],
    pub temperature: [f64; 2],
}

impl PrimitiveGradient {
    pub fn divergence(&self) -> f64 {
        self.vel[0][0] + self.vel[1][1]
    }
}

/// Chain rule from entropy-variable gradients to primitive gradients.
pub fn primitive_gradient(w: &Primitive, gw: [State; 2], gas: &GasModel) -> PrimitiveGradient {
    let g = gas.gamma;
    let b = w.rho / w.p;
    let mut out = PrimitiveGradient::default();
    for d in 0..2 {
        let gb = -gw[d][3];
        let gu = (gw[d][1] - w.u * gb) / b;
        let gv = (gw[d][2] - w.v * gb) / b;
        let gs = -(g - 1.0) * (gw[d][0] + 0.5 * gb * (w.u * w.u + w.v * w.v) + b * (w.u * gu + w.v * gv));
        let glnrho = (gs + gb / b) / (1.0 - g);
        let grho = w.rho * glnrho;
        out.rho[d] = grho;
        out.vel[0][d] = gu;
        out.vel[1][d] = gv;
        out.p[d] = (grho - w.p * gb) / b;
        out.temperature[d] = -gb / (b * b * gas.gas_constant);
    }
    out
}

/// Primitive gradients at every node from BR1 entropy gradients.
pub fn primitive_gradients(
    disc: &Discretization,
    field: &ConservativeField,
    grads: &GradientField,
) -> Result<Vec<PrimitiveGradient>> {
    let gas = &disc.gas;
    let npe = disc.nodes_per_element();
    field
        .nodes()
        .par_iter()
        .enumerate()
        .map(|(idx, q)| {
            let w = crate::gas::admissible_primitive(q, gas).map_err(|e| e.at_element(idx / npe, 0.0))?;
            Ok(primitive_gradient(&w, [grads.dx[idx], grads.dy[idx]], gas))
        })
        .collect()
}

/// Pressure gradient and velocity divergence at one node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowGradient {
    pub p: [f64; 2],
    pub div_v: f64,
}

/// `[u, v, p]` of an admissible state.
#[inline]
fn velocity_pressure(q: &State, gas: &GasModel) -> Option<[f64; 3]> {
    let inv = 1.0 / q[0];
    let (u, v) = (q[1] * inv, q[2] * inv);
    let p = (gas.gamma - 1.0) * (q[3] - 0.5 * (q[1] * u + q[2] * v));
    (q[0] > 0.0 && p > 0.0 && u.is_finite() && v.is_finite()).then_some([u, v, p])
}

/// BR1 lifting with central face values applied directly to `p`, `u` and `v`,
/// keeping only what the sensors read. Much cheaper than going through the
/// entropy variables.
pub fn flow_gradients(disc: &Discretization, field: &ConservativeField, t: f64) -> Result<Vec<FlowGradient>> {
    disc.check_layout(field)?;
    let gas = &disc.gas;
    let mesh = &disc.mesh;
    let n = disc.n1d();
    let npe = n * n;
    let wts = disc.ops.weights();
    let d = disc.ops.derivative();
    let scale = metric_scale(disc);
    let q = field.nodes();
    let bad = |e: usize, q: &State| {
        let p = crate::gas::pressure(q, gas);
        Error::NonAdmissible { density: q[0], pressure: p }.at_element(e, t)
    };
    let mut w = vec![[0.0; 3]; q.len()];
    w.par_iter_mut().zip(q.par_iter()).enumerate().try_for_each(|(idx, (slot, s))| -> Result<()> {
        *slot = velocity_pressure(s, gas).ok_or_else(|| bad(idx / npe, s))?;
        Ok(())
    })?;

    let mut out = vec![FlowGradient::default(); q.len()];
    out.par_chunks_mut(npe).enumerate().try_for_each(|(e, ge)| -> Result<()> {
        let we = &w[e * npe..(e + 1) * npe];
        // Central face values, indexed by the position along the face.
        let mut face = [[[0.0; 3]; MAX_N1D]; 4];
        for (s, side) in Side::ALL.into_iter().enumerate() {
            let own = |j: usize| match side {
                Side::West => j * n,
                Side::East => n - 1 + j * n,
                Side::South => j,
                Side::North => j + (n - 1) * n,
            };
            let mirror = |j: usize| match side {
                Side::West => n - 1 + j * n,
                Side::East => j * n,
                Side::South => j + (n - 1) * n,
                Side::North => j,
            };
            for j in 0..n {
                let k = own(j);
                let other = match mesh.neighbor(e, side) {
                    Neighbor::Element(nb) => w[nb * npe + mirror(j)],
                    Neighbor::Boundary(_) => {
                        let idx = e * npe + k;
                        let g = disc.boundaries.side(side).exterior(&q[idx], side.normal(), disc.coords[idx], t, gas)?;
                        velocity_pressure(&g, gas).ok_or_else(|| bad(e, &g))?
                    }
                };
                for c in 0..3 {
                    face[s][j][c] = 0.5 * (we[k][c] + other[c]);
                }
            }
        }
        let [west, east, south, north] = &face;
        for jj in 0..n {
            for ii in 0..n {
                let k = ii + jj * n;
                // x: p and u; y: p and v.
                let (mut px, mut ux, mut py, mut vy) = (0.0, 0.0, 0.0, 0.0);
                for m in 0..n {
                    let (ax, ay) = (&we[m + jj * n], &we[ii + m * n]);
                    let (dx, dy) = (d.get(ii, m), d.get(jj, m));
                    px += dx * (ax[2] - we[k][2]);
                    ux += dx * (ax[0] - we[k][0]);
                    py += dy * (ay[2] - we[k][2]);
                    vy += dy * (ay[1] - we[k][1]);
                }
                if ii == 0 {
                    px -= (west[jj][2] - we[k][2]) / wts[0];
                    ux -= (west[jj][0] - we[k][0]) / wts[0];
                }
                if ii == n - 1 {
                    px += (east[jj][2] - we[k][2]) / wts[n - 1];
                    ux += (east[jj][0] - we[k][0]) / wts[n - 1];
                }
                if jj == 0 {
                    py -= (south[ii][2] - we[k][2]) / wts[0];
                    vy -= (south[ii][1] - we[k][1]) / wts[0];
                }
                if jj == n - 1 {
                    py += (north[ii][2] - we[k][2]) / wts[n - 1];
                    vy += (north[ii][1] - we[k][1]) / wts[n - 1];
                }
                ge[k] = FlowGradient {
                    p: [scale[0] * px, scale[1] * py],
                    div_v: scale[0] * ux + scale[1] * vy,
                };
            }
        }
        Ok(())
    })?;
    Ok(out)
}

/// Chain rule from entropy-variable gradients to `grad p` and `div v` at one
/// node; the algebra of [`primitive_gradient`] restricted to what the sensors read.
/// `None` for an inadmissible state.
#[inline]
pub fn flow_gradient_from_entropy(q: &State, gx: &State, gy: &State, gas: &GasModel) -> Option<FlowGradient> {
    let [u, v, p] = velocity_pressure(q, gas)?;
    let rho = q[0];
    let inv_b = p / rho;
    let vel2 = u * u + v * v;
    let inv_1mg = 1.0 / (1.0 - gas.gamma);
    let mut out = FlowGradient::default();
    for (d, gw) in [gx, gy].into_iter().enumerate() {
        let gb = -gw[3];
        let gu = (gw[1] - u * gb) * inv_b;
        let gv = (gw[2] - v * gb) * inv_b;
        // ds = -(gamma - 1) (dw0 + u dw1 + v dw2 - |v|^2 db / 2), and
        // (1 - gamma) dln(rho) = ds + db / b.
        let inner = gw[0] + u * gw[1] + v * gw[2] - 0.5 * gb * vel2;
        let grho = rho * (inner + gb * inv_b * inv_1mg);
        out.p[d] = (grho - p * gb) * inv_b;
        out.div_v += if d == 0 { gu } else { gv };
    }
    Some(out)
}

/// [`flow_gradient_from_entropy`] at every node.
pub fn flow_gradients_from_entropy(
    disc: &Discretization,
    field: &ConservativeField,
    grads: &GradientField,
) -> Result<Vec<FlowGradient>> {
    disc.check_layout(field)?;
    if grads.dx.len() != field.len() || grads.dy.len() != field.len() {
        return Err(Error::Layout("gradients do not match the field".into()));
    }
    let gas = &disc.gas;
    let npe = disc.nodes_per_element();
    let mut flow = vec![FlowGradient::default(); field.len()];
    flow.par_iter_mut()
        .zip(field.nodes().par_iter().zip(grads.dx.par_iter().zip(grads.dy.par_iter())))
        .enumerate()
        .try_for_each(|(idx, (slot, (q, (gx, gy))))| -> Result<()> {
            *slot = flow_gradient_from_entropy(q, gx, gy, gas).ok_or_else(|| {
                Error::NonAdmissible { density: q[0], pressure: crate::gas::pressure(q, gas) }.at_element(idx / npe, 0.0)
            })?;
            Ok(())
        })?;
    Ok(flow)
}

fn dissipative_fluxes(
    disc: &Discretization,
    aux: &[FluxAux],
    grads: &GradientField,
    coeffs: Option<&[ArtificialCoefficients]>,
) -> Vec<BlockFlux> {
    let gas = &disc.gas;
    let npe = disc.nodes_per_element();
    let mu = disc.viscosity;
    aux.par_iter()
        .enumerate()
        .map(|(idx, a)| {
            let w = Primitive::new(a.rho, a.u, a.v, a.p);
            let g = primitive_gradient(&w, [grads.dx[idx], grads.dy[idx]], gas);
            let mut f = [ZERO; 2];
            if mu > 0.0 {
                f = viscous_flux(&w, g.vel, g.temperature, mu, gas);
            }
            if let Some(c) = coeffs {
                let c = c[idx / npe];
                if c.alpha > 0.0 || c.mu > 0.0 {
                    let grhoei = [g.p[0] / (gas.gamma - 1.0), g.p[1] / (gas.gamma - 1.0)];
                    let fa = guermond_popov_flux(a.rho, [a.u, a.v], g.rho, g.vel, grhoei, c.alpha, c.mu);
                    for d in 0..2 {
                        for k in 0..4 {
                            f[d][k] += fa[d][k];
                        }
                    }
                }
            }
            f
        })
        .collect()
}

/// Adds `div(F_v)` with central face fluxes; boundary faces use the interior flux.
fn add_dissipative_divergence(disc: &Discretization, fv: &[BlockFlux], out: &mut ConservativeField) {
    let n = disc.n1d();
    let npe = n * n;
    let mesh = &disc.mesh;
    let wts = disc.ops.weights();
    let d = disc.ops.derivative();
    let scale = metric_scale(disc);
    out.nodes_mut()
        .par_chunks_mut(npe)
        .enumerate()
        .for_each(|(e, oe)| {
            let fe = &fv[e * npe..(e + 1) * npe];
            let nb = |side| match mesh.neighbor(e, side) {
                Neighbor::Element(o) => Some(&fv[o * npe..(o + 1) * npe]),
                Neighbor::Boundary(_) => None,
            };
            let (west, east, south, north) = (nb(Side::West), nb(Side::East), nb(Side::South), nb(Side::North));
            for line in 0..n {
                for i in 0..n {
                    let kx = i + line * n;
                    let ky = line + i * n;
                    let mut ax = ZERO;
                    let mut ay = ZERO;
                    for m in 0..n {
                        let dim = d.get(i, m);
                        let qx = &fe[m + line * n][0];
                        let qy = &fe[line + m * n][1];
                        for c in 0..4 {
                            ax[c] += dim * (qx[c] - fe[kx][0][c]);
                            ay[c] += dim * (qy[c] - fe[ky][1][c]);
                        }
                    }
                    if i == 0 {
                        if let Some(o) = west {
                            let other = &o[(n - 1) + line * n][0];
                            for c in 0..4 {
                                ax[c] -= 0.5 * (other[c] - fe[kx][0][c]) / wts[0];
                            }
                        }
                        if let Some(o) = south {
                            let other = &o[line + (n - 1) * n][1];
                            for c in 0..4 {
                                ay[c] -= 0.5 * (other[c] - fe[ky][1][c]) / wts[0];
                            }
                        }
                    }
                    if i == n - 1 {
                        if let Some(o) = east {
                            let other = &o[line * n][0];
                            for c in 0..4 {
                                ax[c] += 0.5 * (other[c] - fe[kx][0][c]) / wts[n - 1];
                            }
                        }
                        if let Some(o) = north {
                            let other = &o[line][1];
                            for c in 0..4 {
                                ay[c] += 0.5 * (other[c] - fe[ky][1][c]) / wts[n - 1];
                            }
                        }
                    }
                    for c in 0..4 {
                        oe[kx][c] += scale[0] * ax[c];
                        oe[ky][c] += scale[1] * ay[c];
                    }
                }
            }
        });
}

/// Time derivative `dq/dt` of the semi-discrete system.
pub fn assemble_rhs(
    disc: &Discretization,
    field: &ConservativeField,
    t: f64,
    stab: Stabilization<'_>,
) -> Result<ConservativeField> {
    let mut out = ConservativeField::zeros(field.num_elements(), field.nodes_per_element());
    assemble_rhs_into(disc, field, t, stab, &mut out)?;
    Ok(out)
}

pub fn assemble_rhs_into(
    disc: &Discretization,
    field: &ConservativeField,
    t: f64,
    stab: Stabilization<'_>,
    out: &mut ConservativeField,
) -> Result<()> {
    let inputs = prepare_rhs(disc, field, t, false)?;
    assemble_rhs_prepared(disc, field, t, stab, &inputs, out)
}

/// Node and trace data of one state, reusable by the RHS of that state.
pub struct RhsInputs {
    aux: Vec<FluxAux>,
    traces: Traces,
    grads: Option<GradientField>,
}

impl RhsInputs {
    /// BR1 entropy gradients, when they were requested.
    pub fn gradients(&self) -> Option<&GradientField> {
        self.grads.as_ref()
    }
}

/// Validates `field` and gathers what its RHS needs; `with_gradients` also
/// lifts the entropy gradients up front so other consumers can share them.
pub fn prepare_rhs(disc: &Discretization, field: &ConservativeField, t: f64, with_gradients: bool) -> Result<RhsInputs> {
    disc.check_layout(field)?;
    let aux = disc.aux(field, t)?;
    let traces = compute_traces(disc, field, t)?;
    let grads = with_gradients.then(|| gradients_from_aux(disc, &aux, &traces));
    Ok(RhsInputs { aux, traces, grads })
}

/// [`assemble_rhs_into`] from data prepared for the same `field` and `t`.
pub fn assemble_rhs_prepared(
    disc: &Discretization,
    field: &ConservativeField,
    t: f64,
    stab: Stabilization<'_>,
    inputs: &RhsInputs,
    out: &mut ConservativeField,
) -> Result<()> {
    disc.check_layout(field)?;
    disc.check_layout(out)?;
    if inputs.aux.len() != field.len() {
        return Err(Error::Layout("prepared inputs belong to a different field".into()));
    }
    let mesh = &disc.mesh;
    let n = disc.n1d();
    let npe = n * n;
    let gas = &disc.gas;
    let gamma = gas.gamma;
    let wts = disc.ops.weights();
    let scale = metric_scale(disc);

    let blend = match stab {
        Stabilization::Blending(b) => {
            if b.num_elements() != mesh.num_elements() || b.n1d != n {
                return Err(Error::Layout("blend coefficients do not match the mesh".into()));
            }
            Some(b)
        }
        _ => None,
    };
    let coeffs = match stab {
        Stabilization::Viscosity(c) => {
            if c.len() != mesh.num_elements() {
                return Err(Error::Layout(format!(
                    "{} viscosity coefficients for {} elements",
                    c.len(),
                    mesh.num_elements()
                )));
            }
            Some(c)
        }
        _ => None,
    };

    let aux = &inputs.aux;
    let traces = &inputs.traces;
    let fx = face_fluxes(disc, &traces.x, [1.0, 0.0], n, t)?;
    let fy = face_fluxes(disc, &traces.y, [0.0, 1.0], n, t)?;

    let q = field.nodes();
    out.nodes_mut()
        .par_chunks_mut(npe)
        .enumerate()
        .for_each(|(e, oe)| {
            let ae = &aux[e * npe..(e + 1) * npe];
            let qe = &q[e * npe..(e + 1) * npe];
            let [fw, fe, fs, fn_] = element_faces(mesh, e);
            let active = blend.map(|b| b.is_active(e)).unwrap_or(false);
            for o in oe.iter_mut() {
                *o = ZERO;
            }
            for axis in 0..2 {
                let (faces, f_lo, f_hi) = if axis == 0 { (&fx, fw, fe) } else { (&fy, fs, fn_) };
                for line in 0..n {
                    let idx = line_indices(n, line, axis);
                    let idx = &idx[..n];
                    let star_lo = faces[f_lo * n + line];
                    let star_hi = faces[f_hi * n + line];
                    if active {
                        let b = blend.expect("active implies blending");
                        let alpha = if axis == 0 { b.element_x(e) } else { b.element_y(e) };
                        let alpha = &alpha[line * (n + 1)..(line + 1) * (n + 1)];
                        let mut dg = [ZERO; MAX_N1D + 1];
                        let mut fv = [ZERO; MAX_N1D + 1];
                        dg_subcell_line(ae, idx, &disc.d2, wts, axis, gamma, &mut dg);
                        fv_subcell_line(qe, ae, idx, axis, gas, &mut fv);
                        let mut f = [ZERO; MAX_N1D + 1];
                        f[0] = star_lo;
                        f[n] = star_hi;
                        for m in 1..n {
                            for c in 0..4 {
                                f[m][c] = dg[m][c] + alpha[m] * (fv[m][c] - dg[m][c]);
                            }
                        }
                        for i in 0..n {
                            for c in 0..4 {
                                oe[idx[i]][c] -= scale[axis] * (f[i + 1][c] - f[i][c]) / wts[i];
                            }
                        }
                    } else {
                        let mut acc = [ZERO; MAX_N1D];
                        splitform_line(ae, idx, &disc.d2, axis, gamma, &mut acc);
                        let a0 = &ae[idx[0]];
                        let an = &ae[idx[n - 1]];
                        let p0 = ec_flux_axis(a0, a0, axis, gamma);
                        let pn = ec_flux_axis(an, an, axis, gamma);
                        for c in 0..4 {
                            acc[0][c] -= (star_lo[c] - p0[c]) / wts[0];
                            acc[n - 1][c] += (star_hi[c] - pn[c]) / wts[n - 1];
                        }
                        for i in 0..n {
                            for c in 0..4 {
                                oe[idx[i]][c] -= scale[axis] * acc[i][c];
                            }
                        }
                    }
                }
            }
        });

    let needs_gradients = disc.viscosity > 0.0
        || coeffs.is_some_and(|c| c.iter().any(|c| c.alpha > 0.0 || c.mu > 0.0));
    if needs_gradients {
        let lifted;
        let grads = match &inputs.grads {
            Some(g) => g,
            None => {
                lifted = gradients_from_aux(disc, aux, traces);
                &lifted
            }
        };
        let fdiss = dissipative_fluxes(disc, aux, grads, coeffs);
        add_dissipative_divergence(disc, &fdiss, out);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boundary::BoundaryCondition;
    use crate::gas::{conservative_from_primitive, entropy_variables};
    use crate::mesh::{build_cartesian_mesh, MeshConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn periodic_disc(nx: usize, ny: usize, order: usize) -> Discretization {
        let mesh = build_cartesian_mesh(&MeshConfig {
            nx,
            ny,
            x_min: 0.0,
            x_max: 2.0,
            y_min: -1.0,
            y_max: 0.5,
            periodic_x: true,
            periodic_y: true,
        })
        .unwrap();
        Discretization::new(mesh, OperatorSet::new(order).unwrap(), GasModel::default(), BoundarySet::periodic()).unwrap()
    }

    fn prim(rho: f64, u: f64, v: f64, p: f64) -> State {
        conservative_from_primitive(&Primitive::new(rho, u, v, p), &GasModel::default())
    }

    fn random_element(rng: &mut ChaCha8Rng, npe: usize) -> Vec<State> {
        (0..npe)
            .map(|_| {
                prim(
                    rng.gen_range(0.2..3.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.2..5.0),
                )
            })
            .collect()
    }

    fn smooth_field(disc: &Discretization) -> ConservativeField {
        disc.project(|x, y| {
            let rho = 1.5 + 0.3 * (std::f64::consts::PI * x).sin() * (2.0 * std::f64::consts::PI * y / 1.5).cos();
            prim(rho, 0.4 + 0.1 * (std::f64::consts::PI * y / 0.75).sin(), -0.3, 1.0 + 0.2 * (std::f64::consts::PI * x).cos())
        })
    }

    #[test]
    fn telescoping_reproduces_splitform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for order in 2..=6 {
            let disc = periodic_disc(2, 2, order);
            let npe = disc.nodes_per_element();
            for _ in 0..10 {
                let q = random_element(&mut rng, npe);
                let vol = volume_splitform(&disc, &q).unwrap();
                let sub = subcell_dg_fluxes(&disc, &q).unwrap();
                let tele = sub.divergence(disc.ops().weights(), metric_scale(&disc));
                for k in 0..npe {
                    for c in 0..4 {
                        let tol = 1e-12 * (1.0 + vol[k][c].abs());
                        assert!((vol[k][c] - tele[k][c]).abs() < tol, "P={order} k={k} c={c}: {} vs {}", vol[k][c], tele[k][c]);
                    }
                }
            }
        }
    }

    #[test]
    fn boundary_subcell_fluxes_are_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let disc = periodic_disc(1, 1, 3);
        let q = random_element(&mut rng, 16);
        let sub = subcell_dg_fluxes(&disc, &q).unwrap();
        let gas = GasModel::default();
        for line in 0..4 {
            let west = crate::gas::euler_flux(&q[line * 4], [1.0, 0.0], &gas).unwrap();
            let east = crate::gas::euler_flux(&q[3 + line * 4], [1.0, 0.0], &gas).unwrap();
            for c in 0..4 {
                assert!((sub.get(0, line, 0)[c] - west[c]).abs() < 1e-13 * (1.0 + west[c].abs()));
                assert!((sub.get(0, line, 4)[c] - east[c]).abs() < 1e-13 * (1.0 + east[c].abs()));
            }
        }
    }

    #[test]
    fn uniform_state_has_uniform_subcell_fluxes() {
        let disc = periodic_disc(1, 1, 4);
        let q = vec![prim(1.2, 0.7, -0.4, 2.0); 25];
        let f = crate::gas::euler_flux(&q[0], [0.0, 1.0], disc.gas()).unwrap();
        let sub = subcell_dg_fluxes(&disc, &q).unwrap();
        for v in &sub.y {
            for c in 0..4 {
                assert!((v[c] - f[c]).abs() < 1e-14 * (1.0 + f[c].abs()));
            }
        }
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let disc = periodic_disc(1, 1, 3);
        let q = random_element(&mut rng, 16);
        let dg = subcell_dg_fluxes(&disc, &q).unwrap();
        let fv = subcell_fv_fluxes(&disc, &q).unwrap();
        let len = dg.x.len();
        assert_eq!(blend_subcell_fluxes(&dg, &fv, &vec![0.0; len], &vec![0.0; len]).unwrap(), dg);
        let one = blend_subcell_fluxes(&dg, &fv, &vec![1.0; len], &vec![1.0; len]).unwrap();
        for (a, b) in one.x.iter().chain(&one.y).zip(fv.x.iter().chain(&fv.y)) {
            for c in 0..4 {
                assert!((a[c] - b[c]).abs() < 1e-13 * (1.0 + b[c].abs()));
            }
        }
        let mid = blend_subcell_fluxes(&dg, &fv, &vec![0.5; len], &vec![0.5; len]).unwrap();
        for idx in 0..len {
            for c in 0..4 {
                let expect = 0.5 * (dg.x[idx][c] + fv.x[idx][c]);
                assert!((mid.x[idx][c] - expect).abs() < 1e-13 * (1.0 + expect.abs()));
            }
        }
        assert!(matches!(
            blend_subcell_fluxes(&dg, &fv, &[0.0; 3], &vec![0.0; len]),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn alpha_clamps_and_takes_neighbour_max() {
        let disc = periodic_disc(2, 1, 2);
        let mut s = vec![0.0; disc.num_nodes()];
        s[0] = 0.2; // element 0, node (0,0)
        s[1] = 0.6; // element 0, node (1,0)
        let b = alpha_from_nodal_sensor(&disc, &s, 0.5).unwrap();
        // interface between nodes 0 and 1 of row 0
        assert_eq!(b.element_x(0)[1], 0.5);
        // west face of element 0 pairs node 0 with the periodic neighbour's last node
        assert_eq!(b.element_x(0)[0], 0.2);
        // the neighbour's east face sees the same pair
        assert_eq!(b.element_x(1)[3], 0.2);
        assert!(b.is_active(0) && b.is_active(1));

        let mut s = vec![0.3; disc.num_nodes()];
        let b = alpha_from_nodal_sensor(&disc, &s, 0.5).unwrap();
        assert!(b.element_x(1).iter().chain(b.element_y(0)).all(|&a| a == 0.3));
        s.fill(0.0);
        let b = alpha_from_nodal_sensor(&disc, &s, 0.5).unwrap();
        assert_eq!(b.max(), 0.0);
        assert!(!b.is_active(0));
    }

    fn free_stream_disc() -> (Discretization, State) {
        let gas = GasModel::default();
        let c = (1.4f64).sqrt();
        let q = prim(1.0, 3.0 * c * 0.8, 3.0 * c * 0.6, 1.0);
        let mesh = build_cartesian_mesh(&MeshConfig {
            nx: 3,
            ny: 2,
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            periodic_x: false,
            periodic_y: false,
        })
        .unwrap();
        let bcs = BoundarySet::uniform(BoundaryCondition::Dirichlet(q));
        (Discretization::new(mesh, OperatorSet::new(4).unwrap(), gas, bcs).unwrap(), q)
    }

    #[test]
    fn free_stream_is_preserved_by_every_path() {
        let (disc, q) = free_stream_disc();
        let field = disc.project(|_, _| q);
        let ne = disc.mesh().num_elements();
        let blend = BlendCoefficients::constant(ne, disc.n1d(), 0.5, 0.5);
        let visc = vec![ArtificialCoefficients { alpha: 0.3, mu: 0.2 }; ne];
        for stab in [Stabilization::None, Stabilization::Blending(&blend), Stabilization::Viscosity(&visc)] {
            let rhs = assemble_rhs(&disc, &field, 0.0, stab).unwrap();
            let max = rhs.as_flat().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max <= 1e-12, "{stab:?}: {max}");
        }
    }

    #[test]
    fn periodic_rhs_is_conservative() {
        let disc = periodic_disc(3, 2, 3);
        let field = smooth_field(&disc);
        let ne = disc.mesh().num_elements();
        let blend = BlendCoefficients::constant(ne, disc.n1d(), 0.4, 0.5);
        let visc: Vec<_> = (0..ne).map(|e| ArtificialCoefficients { alpha: 0.01 * e as f64, mu: 0.02 }).collect();
        for stab in [Stabilization::None, Stabilization::Blending(&blend), Stabilization::Viscosity(&visc)] {
            let rhs = assemble_rhs(&disc, &field, 0.0, stab).unwrap();
            let total = disc.integrate(&rhs);
            for c in 0..4 {
                assert!(total[c].abs() < 1e-12, "{stab:?} component {c}: {}", total[c]);
            }
        }
    }

    #[test]
    fn entropy_conservative_fluxes_conserve_entropy() {
        let disc = periodic_disc(3, 2, 3).with_surface_flux(SurfaceFlux::EntropyConservative);
        let field = smooth_field(&disc);
        let rhs = assemble_rhs(&disc, &field, 0.0, Stabilization::None).unwrap();
        let npe = disc.nodes_per_element();
        let prod: f64 = field
            .nodes()
            .iter()
            .zip(rhs.nodes())
            .enumerate()
            .map(|(idx, (q, r))| {
                let w = entropy_variables(q, disc.gas()).unwrap();
                disc.mass_weight(idx % npe) * (0..4).map(|c| w[c] * r[c]).sum::<f64>()
            })
            .sum();
        assert!(prod.abs() < 1e-10, "{prod}");

        let es = periodic_disc(3, 2, 3);
        let rhs = assemble_rhs(&es, &field, 0.0, Stabilization::None).unwrap();
        let prod: f64 = field
            .nodes()
            .iter()
            .zip(rhs.nodes())
            .enumerate()
            .map(|(idx, (q, r))| {
                let w = entropy_variables(q, disc.gas()).unwrap();
                disc.mass_weight(idx % npe) * (0..4).map(|c| w[c] * r[c]).sum::<f64>()
            })
            .sum();
        assert!(prod <= 1e-12);
    }

    #[test]
    fn linear_entropy_variables_have_exact_gradients() {
        let gas = GasModel::default();
        let w_at = |x: f64| -> State { [-2.0 + 0.3 * x, 0.5 - 0.2 * x, 0.0, -1.0 - 0.25 * x] };
        let q_at = |x: f64| crate::gas::conservative_from_entropy_variables(&w_at(x), &gas);
        let mesh = build_cartesian_mesh(&MeshConfig {
            nx: 3,
            ny: 2,
            x_min: 0.0,
            x_max: 1.5,
            y_min: 0.0,
            y_max: 1.0,
            periodic_x: false,
            periodic_y: true,
        })
        .unwrap();
        let mut bcs = BoundarySet::periodic();
        bcs.west = BoundaryCondition::Dirichlet(q_at(0.0));
        bcs.east = BoundaryCondition::Dirichlet(q_at(1.5));
        let disc = Discretization::new(mesh, OperatorSet::new(4).unwrap(), gas, bcs).unwrap();
        let field = disc.project(|x, _| q_at(x));
        let g = compute_gradients_br1(&disc, &field, 0.0).unwrap();
        let slope = [0.3, -0.2, 0.0, -0.25];
        for k in 0..field.len() {
            for c in 0..4 {
                assert!((g.dx[k][c] - slope[c]).abs() < 1e-12, "{k} {c}: {}", g.dx[k][c]);
                assert!(g.dy[k][c].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn lifted_gradient_satisfies_discrete_divergence_theorem() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gas = GasModel::default();
        let mesh = build_cartesian_mesh(&MeshConfig {
            nx: 1,
            ny: 1,
            x_min: 0.0,
            x_max: 0.8,
            y_min: 0.0,
            y_max: 0.6,
            periodic_x: false,
            periodic_y: false,
        })
        .unwrap();
        let bcs = BoundarySet::uniform(BoundaryCondition::Dirichlet(prim(1.1, 0.2, 0.1, 0.9)));
        let disc = Discretization::new(mesh, OperatorSet::new(3).unwrap(), gas, bcs).unwrap();
        let q = ConservativeField::from_vec(16, random_element(&mut rng, 16)).unwrap();
        let g = compute_gradients_br1(&disc, &q, 0.0).unwrap();
        let ghost = entropy_variables(&prim(1.1, 0.2, 0.1, 0.9), &gas).unwrap();
        let wts = disc.ops().weights();
        for c in 0..4 {
            let lhs: f64 = (0..16).map(|k| disc.mass_weight(k) * g.dx[k][c]).sum();
            let rhs: f64 = (0..4)
                .map(|j| {
                    let w_e = g.entropy[3 + 4 * j][c];
                    let w_w = g.entropy[4 * j][c];
                    0.5 * disc.mesh().dy() * wts[j] * (0.5 * (w_e + ghost[c]) - 0.5 * (w_w + ghost[c]))
                })
                .sum();
            assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()), "{c}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn chain_rule_matches_finite_differences() {
        let gas = GasModel::default();
        let w0 = Primitive::new(1.3, 0.4, -0.2, 0.8);
        let dprim = [0.7, -0.3, 0.5, 1.1];
        let h = 1e-6;
        let at = |s: f64| {
            let w = Primitive::new(w0.rho + s * dprim[0], w0.u + s * dprim[1], w0.v + s * dprim[2], w0.p + s * dprim[3]);
            crate::gas::entropy_variables_from_primitive(&w, &gas)
        };
        let (wp, wm) = (at(h), at(-h));
        let gw: State = std::array::from_fn(|c| (wp[c] - wm[c]) / (2.0 * h));
        let g = primitive_gradient(&w0, [gw, ZERO], &gas);
        assert!((g.rho[0] - dprim[0]).abs() < 1e-8);
        assert!((g.vel[0][0] - dprim[1]).abs() < 1e-8);
        assert!((g.vel[1][0] - dprim[2]).abs() < 1e-8);
        assert!((g.p[0] - dprim[3]).abs() < 1e-8);
        let dt = dprim[3] / w0.rho - w0.p * dprim[0] / (w0.rho * w0.rho);
        assert!((g.temperature[0] - dt).abs() < 1e-8);

        let q = conservative_from_primitive(&w0, &gas);
        let gy: State = std::array::from_fn(|c| 0.5 * gw[c]);
        let f = flow_gradient_from_entropy(&q, &gw, &gy, &gas).unwrap();
        assert!((f.p[0] - dprim[3]).abs() < 1e-8 && (f.p[1] - 0.5 * dprim[3]).abs() < 1e-8);
        assert!((f.div_v - (dprim[1] + 0.5 * dprim[2])).abs() < 1e-8);
    }

    #[test]
    fn density_wave_rhs_converges() {
        // rho = 2 + sin(pi x), u = 1, p = 1: exact -df/dx for the mass row is -pi cos(pi x).
        let gas = GasModel::default();
        let order = 3;
        let mut errors = Vec::new();
        for nx in [8usize, 16, 32, 64] {
            let mesh = build_cartesian_mesh(&MeshConfig {
                nx,
                ny: 1,
                x_min: -1.0,
                x_max: 1.0,
                y_min: 0.0,
                y_max: 2.0 / nx as f64,
                periodic_x: true,
                periodic_y: true,
            })
            .unwrap();
            let disc = Discretization::new(mesh, OperatorSet::new(order).unwrap(), gas, BoundarySet::periodic()).unwrap();
            let field = disc.project(|x, _| prim(2.0 + (std::f64::consts::PI * x).sin(), 1.0, 0.0, 1.0));
            let rhs = assemble_rhs(&disc, &field, 0.0, Stabilization::None).unwrap();
            let err = rhs
                .nodes()
                .iter()
                .zip(disc.coordinates())
                .map(|(r, &[x, _])| (r[0] + std::f64::consts::PI * (std::f64::consts::PI * x).cos()).abs())
                .fold(0.0, f64::max);
            errors.push(err);
        }
        let rate = (errors[2] / errors[3]).log2();
        // Pointwise derivative of a degree-P interpolant converges at order P.
        assert!(rate > order as f64 - 0.1, "errors {errors:?}, rate {rate}");
    }

    #[test]
    fn arithmetic_mean_split_form_equals_standard_divergence() {
        // Operator identity: with F# = (F_i + F_k)/2 the split form is D F.
        let ops = OperatorSet::new(4).unwrap();
        let n = ops.n1d();
        let x = ops.nodes();
        let f: Vec<f64> = x.iter().map(|&x| 1.0 + x - 2.0 * x.powi(3) + 0.5 * x.powi(4)).collect();
        let df = ops.differentiate(&f);
        for i in 0..n {
            let split: f64 = (0..n).map(|k| 2.0 * ops.derivative().get(i, k) * 0.5 * (f[i] + f[k])).sum();
            assert!((split - df[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn flow_gradients_are_exact_for_linear_primitives_away_from_the_boundary() {
        let mesh = build_cartesian_mesh(&MeshConfig {
            nx: 3,
            ny: 3,
            x_min: 0.0,
            x_max: 1.5,
            y_min: 0.0,
            y_max: 1.2,
            periodic_x: false,
            periodic_y: false,
        })
        .unwrap();
        let bcs = BoundarySet::uniform(BoundaryCondition::SlipWall);
        let disc = Discretization::new(mesh, OperatorSet::new(3).unwrap(), GasModel::default(), bcs).unwrap();
        let field = disc.project(|x, y| prim(1.0 + 0.1 * x, 0.2 + 0.4 * x, -0.1 + 0.5 * y, 1.0 + 0.3 * x - 0.1 * y));
        let g = flow_gradients(&disc, &field, 0.0).unwrap();
        let npe = disc.nodes_per_element();
        for k in 4 * npe..5 * npe {
            assert!((g[k].p[0] - 0.3).abs() < 1e-12, "{:?}", g[k]);
            assert!((g[k].p[1] + 0.1).abs() < 1e-12);
            assert!((g[k].div_v - 0.9).abs() < 1e-12);
        }
        // A uniform state is exact everywhere, walls included.
        let still = disc.project(|_, _| prim(1.3, 0.0, 0.0, 0.7));
        assert!(flow_gradients(&disc, &still, 0.0).unwrap().iter().all(|g| g.p == [0.0, 0.0] && g.div_v == 0.0));
    }

    #[test]
    fn non_admissible_state_reports_element() {
        let disc = periodic_disc(2, 2, 2);
        let mut field = smooth_field(&disc);
        field.element_mut(3)[4][0] = -1.0;
        match assemble_rhs(&disc, &field, 0.25, Stabilization::None) {
            Err(Error::Numerical { element, time, .. }) => {
                assert_eq!(element, 3);
                assert_eq!(time, 0.25);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
