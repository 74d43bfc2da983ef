use cpdsa::backprop::{backward_neuron_step, surrogate, BranchFlags, NeuronAdjoint, NeuronRecord};
use cpdsa::neurons::{
    clamp_scalars, cpdsa_step, dsa_soma_expansion, dsa_step, lif_step, scalars_in_range, NeuronParams, NeuronState,
    ResetMode, SCALAR_RANGES,
};
use proptest::prelude::*;

fn scalars() -> impl Strategy<Value = [f64; 7]> {
    (0.0f64..2.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0)
        .prop_map(|(a, b, c, d, e, f, g)| [a, b, c, d, e, f, g])
}

fn params() -> impl Strategy<Value = NeuronParams> {
    scalars().prop_map(|s| NeuronParams::default().with_scalars(&s))
}

fn record() -> impl Strategy<Value = NeuronRecord> {
    (
        prop::array::uniform6(-2.0f64..2.0),
        prop::array::uniform3(any::<bool>()),
        prop::array::uniform2(any::<bool>()),
    )
        .prop_map(|(f, b, g)| NeuronRecord {
            x: f[0],
            u: f[1],
            v: f[2],
            o: b[0] as u8 as f64,
            e: 0.0,
            gate_up: g[0],
            u_w: f[3],
            v_w: f[4],
            o_w: b[1] as u8 as f64,
            w: f[5],
            gate_down: g[1],
        })
}

fn adjoint() -> impl Strategy<Value = NeuronAdjoint> {
    prop::array::uniform6(-3.0f64..3.0).prop_map(|a| NeuronAdjoint {
        u: a[0],
        v: a[1],
        o: a[2],
        u_w: a[3],
        v_w: a[4],
        o_w: a[5],
        x: 0.0,
    })
}

fn combine(a: f64, x: &NeuronAdjoint, b: f64, y: &NeuronAdjoint) -> NeuronAdjoint {
    NeuronAdjoint {
        u: a * x.u + b * y.u,
        v: a * x.v + b * y.v,
        o: a * x.o + b * y.o,
        u_w: a * x.u_w + b * y.u_w,
        v_w: a * x.v_w + b * y.v_w,
        o_w: a * x.o_w + b * y.o_w,
        x: a * x.x + b * y.x,
    }
}

const FULL: BranchFlags = BranchFlags { enhance: true, weaken: true };

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn soma_equals_four_term_expansion(
        p in params(),
        u in -3.0f64..3.0,
        v in -3.0f64..3.0,
        o in any::<bool>(),
        x in -3.0f64..3.0,
    ) {
        let o = o as u8 as f64;
        let (_, vn, _) = dsa_step(&p, &[u], &[v], &[o], &[x]).unwrap();
        let scale = (p.beta2 * v).abs() + (p.alpha2 * p.beta1 * u).abs() + (p.alpha1 * p.alpha2 * x).abs()
            + ((1.0 + p.alpha2) * p.rho * o).abs();
        prop_assert!((vn[0] - dsa_soma_expansion(&p, u, v, o, x)).abs() <= 1e-15 * scale.max(1.0));
    }

    #[test]
    fn adjoints_are_linear_in_upstream(
        p in params(),
        rec in record(),
        prev in record(),
        n1 in adjoint(),
        n2 in adjoint(),
        g1 in -2.0f64..2.0,
        g2 in -2.0f64..2.0,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let run = |n: &NeuronAdjoint, g: f64| {
            let mut sg = [0.0; 7];
            let adj = backward_neuron_step(&p, FULL, 1.0, n, g, &rec, &prev, &mut sg);
            (adj, sg)
        };
        let (r1, s1) = run(&n1, g1);
        let (r2, s2) = run(&n2, g2);
        let (r, s) = run(&combine(a, &n1, b, &n2), a * g1 + b * g2);
        let want = combine(a, &r1, b, &r2);
        let pairs = [
            (r.u, want.u), (r.v, want.v), (r.o, want.o), (r.u_w, want.u_w),
            (r.v_w, want.v_w), (r.o_w, want.o_w), (r.x, want.x),
        ];
        for (got, exp) in pairs {
            prop_assert!(got.is_finite());
            prop_assert!((got - exp).abs() <= 1e-11, "{got} vs {exp}");
        }
        for k in 0..7 {
            prop_assert!((s[k] - (a * s1[k] + b * s2[k])).abs() <= 1e-11);
        }
    }

    #[test]
    fn dendrite_adjoint_case_split(p in params(), rec in record(), prev in record(), next in adjoint(), g in -2.0f64..2.0) {
        let mut sg = [0.0; 7];
        let adj = backward_neuron_step(&p, FULL, 1.0, &next, g, &rec, &prev, &mut sg);
        let a_o = g - p.rho * (next.u + next.v);
        let a_v = p.beta2 * next.v + a_o * surrogate(rec.v, p.v_th, 1.0);
        let factor = if rec.gate_up { p.alpha2 + p.mu } else { p.alpha2 };
        prop_assert_eq!(adj.u, p.beta1 * next.u + a_v * factor);
        let a_ow = g - p.rho * (next.u_w + next.v_w);
        let a_vw = p.beta2 * next.v_w + a_ow * surrogate(rec.v_w, p.u_th, 1.0);
        let factor_w = if rec.gate_down { p.alpha2 + p.phi } else { p.alpha2 };
        prop_assert_eq!(adj.u_w, p.beta1 * next.u_w + a_vw * factor_w);
    }

    #[test]
    fn clamping_lands_in_range(raw in prop::array::uniform7(-5.0f64..5.0)) {
        let mut s = raw;
        clamp_scalars(&mut s);
        prop_assert!(scalars_in_range(&s));
        for k in 0..7 {
            let (lo, hi) = SCALAR_RANGES[k];
            if (lo..=hi).contains(&raw[k]) {
                prop_assert_eq!(s[k], raw[k]);
            }
        }
    }

    #[test]
    fn enhanced_branch_without_increments_is_dsa(
        s in scalars(),
        xs in prop::collection::vec(prop::collection::vec(-1.0f64..2.0, 4), 1..12),
    ) {
        let mut p = NeuronParams::default().with_scalars(&s);
        p.mu = 0.0;
        p.phi = 0.0;
        let mut cp = NeuronState::resting(4);
        let (mut u, mut v, mut o) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
        for x in &xs {
            let step = cpdsa_step(&p, &cp, x).unwrap();
            let (un, vn, on) = dsa_step(&p, &u, &v, &o, x).unwrap();
            prop_assert_eq!(&step.state.u, &un);
            prop_assert_eq!(&step.state.v, &vn);
            prop_assert_eq!(&step.state.o, &on);
            prop_assert!(step.enhancement.iter().chain(&step.weakening).all(|&e| e == 0.0));
            cp = step.state;
            (u, v, o) = (un, vn, on);
        }
    }

    #[test]
    fn dsa_reduces_to_soft_lif(beta2 in 0.05f64..0.95, xs in prop::collection::vec(prop::collection::vec(-1.0f64..2.0, 3), 1..20)) {
        let mut p = NeuronParams::default();
        p.alpha1 = 1.0;
        p.alpha2 = 1.0;
        p.beta1 = 0.0;
        p.beta2 = beta2;
        p.rho = p.v_th / 2.0;
        let mut lif = p;
        lif.tau = 1.0 / (1.0 - beta2);
        let (mut u, mut v, mut o) = (vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]);
        let (mut lu, mut lo) = (vec![0.0; 3], vec![0.0; 3]);
        for x in &xs {
            (u, v, o) = dsa_step(&p, &u, &v, &o, x).unwrap();
            (lu, lo) = lif_step(&lif, &lu, &lo, x, ResetMode::Soft).unwrap();
            for i in 0..3 {
                prop_assert!((v[i] - lu[i]).abs() <= 1e-12, "{} vs {}", v[i], lu[i]);
            }
            prop_assert_eq!(&o, &lo);
        }
    }
}

#[test]
fn hand_trajectory() {
    let p = NeuronParams::default();
    let r1 = cpdsa_step(&p, &NeuronState::resting(1), &[1.0]).unwrap();
    let s = &r1.state;
    assert_eq!([s.u[0], r1.enhancement[0], s.v[0], s.o[0]], [1.0, 0.5, 1.0, 1.0]);
    assert_eq!([s.u_w[0], s.v_w[0], s.o_w[0], r1.spikes[0]], [1.0, 0.5, 0.0, 1.0]);
    let r2 = cpdsa_step(&p, &r1.state, &[0.0]).unwrap();
    assert_eq!([r2.state.v[0], r2.state.v_w[0], r2.spikes[0]], [0.0, 0.75, 0.0]);
}

#[test]
fn quiescent_on_zero_input() {
    let p = NeuronParams::default();
    let mut s = NeuronState::resting(5);
    for _ in 0..50 {
        let r = cpdsa_step(&p, &s, &[0.0; 5]).unwrap();
        assert!(r.spikes.iter().all(|&x| x == 0.0));
        assert!(r.state.v.iter().chain(&r.state.v_w).all(|&v| v == 0.0));
        s = r.state;
    }
    let (u, o) = lif_step(&p, &[0.0; 2], &[0.0; 2], &[0.0; 2], ResetMode::Hard).unwrap();
    assert_eq!((u, o), (vec![0.0; 2], vec![0.0; 2]));
}

#[test]
fn spikes_at_threshold_and_strict_gates() {
    let p = NeuronParams::default();
    // u = 1 rising, e = 0.5; v = 0.5 + 0.5 = 1.0 >= 0.5.
    let r = cpdsa_step(&p, &NeuronState::resting(1), &[1.0]).unwrap();
    assert!(r.gates.gate_up[0] && !r.gates.gate_down[0]);
    // A flat dendrite opens neither gate.
    let mut s = NeuronState::resting(1);
    s.u = vec![2.0];
    s.u_w = vec![2.0];
    let r = cpdsa_step(&p, &s, &[1.0]).unwrap();
    assert_eq!(r.state.u[0], 1.0 + 0.5 * 2.0);
    assert!(!r.gates.gate_up[0] && !r.gates.gate_down[0]);
}
