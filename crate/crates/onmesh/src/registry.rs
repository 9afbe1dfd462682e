//! Built-in problem registry and JSON problem loading.
//!
//! Every entry ships analytic first and second derivatives. Problems are
//! constructed from an override set so JSON configurations can retune
//! numeric data (times, initial states, bounds) without carrying code.

use serde::Deserialize;

use crate::ocp::{Bound, BoundaryFns, OcpSpec, PointFns, TimeBounds};

/// Numeric overrides applied on top of a registered problem.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub t0: Option<f64>,
    pub tf: Option<f64>,
    /// Initial state pin, replacing the entry's default.
    pub x0: Option<Vec<f64>>,
    /// Per-input rate bounds as `[lower, upper]` pairs (null to drop).
    pub u_rate: Option<Vec<Option<(f64, f64)>>>,
    /// Per-state rate bounds.
    pub x_rate: Option<Vec<Option<(f64, f64)>>>,
    /// Fixed initial input values.
    pub u_initial: Option<Vec<Option<f64>>>,
    /// Simple input bounds as `[lower, upper]` pairs.
    pub u_bounds: Option<Vec<(f64, f64)>>,
}

/// JSON problem document: a registered base plus numeric overrides.
#[derive(Debug, Clone, Deserialize)]
pub struct ProblemConfig {
    pub base: String,
    #[serde(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy)]
pub struct ProblemMeta {
    /// Input whose rate drives the singular-arc diagnostics.
    pub rate_input: Option<usize>,
    /// Whether the conventional add-state solve is expected to produce a
    /// singular window.
    pub singular_expected: bool,
    /// Mesh nodes for dense reference solves.
    pub reference_nodes: usize,
}

pub struct ProblemEntry {
    pub name: &'static str,
    pub title: &'static str,
    build_fn: fn(&Overrides) -> OcpSpec,
    pub meta: ProblemMeta,
}

impl ProblemEntry {
    pub fn build(&self) -> OcpSpec {
        (self.build_fn)(&Overrides::default())
    }

    pub fn build_with(&self, overrides: &Overrides) -> OcpSpec {
        (self.build_fn)(overrides)
    }
}

/// Equality rows pinning individual state components at either endpoint.
fn state_pins(pins: Vec<(bool, usize, f64)>, nx: usize, np: usize) -> BoundaryFns {
    let nj = 2 * nx + 2 + np;
    let n = pins.len();
    let eval_pins = pins.clone();
    let jac_pins = pins;
    BoundaryFns::new(n, move |a, out| {
        for (i, &(terminal, s, v)) in eval_pins.iter().enumerate() {
            out[i] = if terminal { a.xf[s] } else { a.x0[s] } - v;
        }
    })
    .with_jac(move |_, j| {
        for (i, &(terminal, s, _)) in jac_pins.iter().enumerate() {
            let col = if terminal { nx + 1 + s } else { s };
            j[i * nj + col] = 1.0;
        }
    })
    .with_hess(|_, _, _| {})
}

fn initial_pin(x0: Vec<f64>, nx: usize, np: usize) -> BoundaryFns {
    state_pins(
        x0.into_iter().enumerate().map(|(i, v)| (false, i, v)).collect(),
        nx,
        np,
    )
}

fn pair_bounds(pairs: &[(f64, f64)]) -> Vec<Bound> {
    pairs.iter().map(|&(lo, hi)| Bound::between(lo, hi)).collect()
}

fn apply_common(mut spec: OcpSpec, o: &Overrides, default_x0: &[f64]) -> OcpSpec {
    if let Some(t0) = o.t0 {
        spec.time.t0 = Bound::fixed(t0);
    }
    if let Some(tf) = o.tf {
        spec.time.tf = Bound::fixed(tf);
    }
    let x0 = o.x0.clone().unwrap_or_else(|| default_x0.to_vec());
    spec.guess.x_t0 = x0.clone();
    spec.boundary = Some(initial_pin(x0, spec.n_states, spec.n_params));
    if let Some(ur) = &o.u_rate {
        spec.u_rate = ur.clone();
    }
    if let Some(xr) = &o.x_rate {
        spec.x_rate = xr.clone();
    }
    if let Some(ui) = &o.u_initial {
        spec.u_initial = ui.clone();
    }
    if let Some(ub) = &o.u_bounds {
        spec.u_bounds = pair_bounds(ub);
    }
    spec
}

/// Singular regulator, rate-bound form: the double-integrator regulator with
/// its velocity treated as the input and the acceleration limit expressed as
/// an input rate bound. Promoting the input recovers the classic two-state
/// formulation with a bang-singular optimal control.
fn sosr(o: &Overrides) -> OcpSpec {
    let spec = OcpSpec::builder(1, 1)
        .dynamics(
            PointFns::new(1, |a, out| out[0] = a.u[0])
                .with_jac(|_, j| j[1] = 1.0) // cols [x, u, t]
                .with_hess(|_, _, _| {}),
        )
        .lagrange(
            PointFns::new(1, |a, out| out[0] = a.x[0] * a.x[0] + a.u[0] * a.u[0])
                .with_jac(|a, j| {
                    j[0] = 2.0 * a.x[0];
                    j[1] = 2.0 * a.u[0];
                })
                .with_hess(|_, w, h| {
                    // vars [x, u]
                    h[0] += 2.0 * w[0];
                    h[3] += 2.0 * w[0];
                }),
        )
        .u_rate_bound(0, -1.0, 1.0)
        .u_initial(0, 1.0)
        .fixed_time(0.0, 5.0)
        .guess_x(vec![0.0], Some(vec![0.0]))
        .guess_u(vec![1.0])
        .build();
    apply_common(spec, o, &[0.0])
}

/// Regulator with the acceleration limit written as a state rate bound on
/// the velocity state; the input is the unbounded acceleration.
fn sosr_rate(o: &Overrides) -> OcpSpec {
    let spec = OcpSpec::builder(2, 1)
        .dynamics(
            PointFns::new(2, |a, out| {
                out[0] = a.x[1];
                out[1] = a.u[0];
            })
            .with_jac(|_, j| {
                // cols [x1, x2, u, t]
                j[1] = 1.0;
                j[4 + 2] = 1.0;
            })
            .with_hess(|_, _, _| {}),
        )
        .lagrange(
            PointFns::new(1, |a, out| {
                out[0] = a.x[0] * a.x[0] + a.x[1] * a.x[1]
            })
            .with_jac(|a, j| {
                j[0] = 2.0 * a.x[0];
                j[1] = 2.0 * a.x[1];
            })
            .with_hess(|_, w, h| {
                // vars [x1, x2, u]
                h[0] += 2.0 * w[0];
                h[4] += 2.0 * w[0];
            }),
        )
        .x_rate_bound(1, -1.0, 1.0)
        .fixed_time(0.0, 5.0)
        .guess_x(vec![0.0, 1.0], Some(vec![0.0, 0.0]))
        .build();
    apply_common(spec, o, &[0.0, 1.0])
}

/// Scalar actuator with a quadratic input nonlinearity and an input rate
/// bound; the add-state rewrite makes the new rate input enter linearly and
/// the settled tracking phase becomes a singular arc.
fn nl_actuator(o: &Overrides) -> OcpSpec {
    let spec = OcpSpec::builder(1, 1)
        .dynamics(
            PointFns::new(1, |a, out| {
                out[0] = -0.5 * a.x[0] + a.u[0] + 0.4 * a.u[0] * a.u[0]
            })
            .with_jac(|a, j| {
                j[0] = -0.5;
                j[1] = 1.0 + 0.8 * a.u[0];
            })
            .with_hess(|_, w, h| {
                // vars [x, u]
                h[3] += 0.8 * w[0];
            }),
        )
        .lagrange(
            PointFns::new(1, |a, out| {
                let e = a.x[0] - 1.0;
                out[0] = e * e
            })
            .with_jac(|a, j| j[0] = 2.0 * (a.x[0] - 1.0))
            .with_hess(|_, w, h| h[0] += 2.0 * w[0]),
        )
        .u_bounds(vec![Bound::between(-3.0, 3.0)])
        .u_rate_bound(0, -2.0, 2.0)
        .fixed_time(0.0, 4.0)
        .guess_x(vec![0.0], Some(vec![1.0]))
        .guess_u(vec![0.5])
        .build();
    apply_common(spec, o, &[0.0])
}

/// Double integrator with cubic damping and a gravity-like term, tracking a
/// unit step under a velocity rate bound. The appended conventional path row
/// is genuinely nonlinear, which is what the per-iteration timing comparison
/// exercises.
fn di_staterate(o: &Overrides) -> OcpSpec {
    let spec = OcpSpec::builder(2, 1)
        .dynamics(
            PointFns::new(2, |a, out| {
                out[0] = a.x[1];
                out[1] = a.u[0] - 0.1 * a.x[1].powi(3) - 0.2 * a.x[0].sin();
            })
            .with_jac(|a, j| {
                // cols [x1, x2, u, t]
                j[1] = 1.0;
                j[4] = -0.2 * a.x[0].cos();
                j[4 + 1] = -0.3 * a.x[1] * a.x[1];
                j[4 + 2] = 1.0;
            })
            .with_hess(|a, w, h| {
                // vars [x1, x2, u]
                h[0] += 0.2 * a.x[0].sin() * w[1];
                h[4] += -0.6 * a.x[1] * w[1];
            }),
        )
        .lagrange(
            PointFns::new(1, |a, out| {
                let e = a.x[0] - 1.0;
                out[0] = e * e + 0.05 * a.u[0] * a.u[0]
            })
            .with_jac(|a, j| {
                j[0] = 2.0 * (a.x[0] - 1.0);
                j[2] = 0.1 * a.u[0];
            })
            .with_hess(|_, w, h| {
                h[0] += 2.0 * w[0];
                h[8] += 0.1 * w[0];
            }),
        )
        .u_bounds(vec![Bound::between(-4.0, 4.0)])
        .x_rate_bound(1, -2.5, 2.5)
        .fixed_time(0.0, 5.0)
        .guess_x(vec![0.0, 0.0], Some(vec![1.0, 0.0]))
        .build();
    apply_common(spec, o, &[0.0, 0.0])
}

/// Ramp-height maximization with pinned initial and terminal input values;
/// objective and dynamics are linear in the input, so the promoted rate
/// input is bang-bang with a single switch and no singular window.
fn lin_rate(o: &Overrides) -> OcpSpec {
    let spec = OcpSpec::builder(1, 1)
        .dynamics(
            PointFns::new(1, |a, out| out[0] = a.u[0])
                .with_jac(|_, j| j[1] = 1.0)
                .with_hess(|_, _, _| {}),
        )
        .mayer(
            BoundaryFns::new(1, |a, out| out[0] = -a.xf[0])
                .with_jac(|_, j| j[2] = -1.0) // cols [x0, t0, xf, tf]
                .with_hess(|_, _, _| {}),
        )
        .u_bounds(vec![Bound::between(-5.0, 5.0)])
        .u_rate_bound(0, -1.0, 1.0)
        .u_initial(0, 0.0)
        .u_terminal(0, 0.0)
        .fixed_time(0.0, 2.0)
        .guess_x(vec![0.0], Some(vec![1.0]))
        .build();
    apply_common(spec, o, &[0.0])
}

/// Minimum-time double integrator rest-to-rest transfer, the free-time
/// smoke problem. The optimum is a symmetric bang-bang with tf = 2.
fn di_mintime(o: &Overrides) -> OcpSpec {
    let nx = 2;
    let spec = OcpSpec::builder(2, 1)
        .dynamics(
            PointFns::new(2, |a, out| {
                out[0] = a.x[1];
                out[1] = a.u[0];
            })
            .with_jac(|_, j| {
                j[1] = 1.0;
                j[4 + 2] = 1.0;
            })
            .with_hess(|_, _, _| {}),
        )
        .mayer(
            BoundaryFns::new(1, |a, out| out[0] = a.tf)
                .with_jac(move |_, j| j[2 * nx + 1] = 1.0)
                .with_hess(|_, _, _| {}),
        )
        .u_bounds(vec![Bound::between(-1.0, 1.0)])
        .time(TimeBounds {
            t0: Bound::fixed(0.0),
            tf: Bound::between(0.5, 4.0),
        })
        .guess_x(vec![0.0, 0.0], Some(vec![1.0, 0.0]))
        .build();
    let mut spec = apply_common(spec, o, &[0.0, 0.0]);
    // both endpoints pinned
    spec.boundary = Some(state_pins(
        vec![(false, 0, 0.0), (false, 1, 0.0), (true, 0, 1.0), (true, 1, 0.0)],
        2,
        0,
    ));
    spec
}

static ENTRIES: &[ProblemEntry] = &[
    ProblemEntry {
        name: "sosr",
        title: "singular regulator (input rate bound form)",
        build_fn: sosr,
        meta: ProblemMeta {
            rate_input: Some(0),
            singular_expected: true,
            reference_nodes: 400,
        },
    },
    ProblemEntry {
        name: "sosr-rate",
        title: "singular regulator (velocity state rate bound form)",
        build_fn: sosr_rate,
        meta: ProblemMeta {
            rate_input: None,
            singular_expected: true,
            reference_nodes: 400,
        },
    },
    ProblemEntry {
        name: "nl-actuator",
        title: "nonlinear actuator with input rate bound",
        build_fn: nl_actuator,
        meta: ProblemMeta {
            rate_input: Some(0),
            singular_expected: true,
            reference_nodes: 300,
        },
    },
    ProblemEntry {
        name: "di-staterate",
        title: "damped double integrator with velocity rate bound",
        build_fn: di_staterate,
        meta: ProblemMeta {
            rate_input: None,
            singular_expected: false,
            reference_nodes: 400,
        },
    },
    ProblemEntry {
        name: "lin-rate",
        title: "ramp height maximization (linear in the input)",
        build_fn: lin_rate,
        meta: ProblemMeta {
            rate_input: Some(0),
            singular_expected: false,
            reference_nodes: 200,
        },
    },
    ProblemEntry {
        name: "di-mintime",
        title: "minimum-time double integrator (free final time)",
        build_fn: di_mintime,
        meta: ProblemMeta {
            rate_input: None,
            singular_expected: false,
            reference_nodes: 200,
        },
    },
];

pub fn list() -> &'static [ProblemEntry] {
    ENTRIES
}

pub fn get(name: &str) -> Option<&'static ProblemEntry> {
    ENTRIES.iter().find(|e| e.name == name)
}

/// Builds a problem from a JSON document of the form
/// `{"base": "<name>", ...overrides}`.
pub fn from_json(doc: &str) -> Result<(OcpSpec, &'static ProblemEntry), String> {
    let cfg: ProblemConfig =
        serde_json::from_str(doc).map_err(|e| format!("bad problem document: {e}"))?;
    let entry = get(&cfg.base).ok_or_else(|| format!("unknown base problem '{}'", cfg.base))?;
    Ok((entry.build_with(&cfg.overrides), entry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::validate;

    #[test]
    fn all_entries_validate() {
        for entry in list() {
            let spec = entry.build();
            validate(spec).unwrap_or_else(|e| panic!("{} failed: {e}", entry.name));
        }
    }

    #[test]
    fn json_overrides_apply() {
        let (spec, entry) = from_json(
            r#"{"base": "sosr", "tf": 4.0, "x0": [0.5], "u_rate": [[-2.0, 2.0]]}"#,
        )
        .unwrap();
        assert_eq!(entry.name, "sosr");
        assert_eq!(spec.time.tf.lower, 4.0);
        assert_eq!(spec.u_rate[0], Some((-2.0, 2.0)));
        assert_eq!(spec.guess.x_t0, vec![0.5]);
        validate(spec).unwrap();
    }

    #[test]
    fn json_unknown_base_is_an_error() {
        assert!(from_json(r#"{"base": "nope"}"#).is_err());
        assert!(from_json(r#"{"base": "sosr", "bogus_field": 1}"#).is_err());
    }
}
