//! Finite-difference verification suites behind the `gradcheck` command.
//!
//! Every differentiable op, the MIL classification path, and the full
//! adaptation objective are checked against central finite differences. The
//! oracle never touches the tape's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::mil::{self, MILArch, MILOutputs, MILParams};
use crate::tensor::{finite_difference_gradient, Matrix, NodeId, Tape, FD_STEP};
use crate::trainer::derive_seed;
use crate::transfer::{transfer_loss, MHFAParams, PTSConfig, TransferMethod, TransferSetting};

/// Pass gate for the `gradcheck` command.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Tighter per-op gate used by the tensor suite.
pub const OP_TOL: f64 = 1e-5;

const RANDOM_POINTS: usize = 20;
const COORDS_PER_TENSOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckScope {
    TensorCore,
    Mil,
    Mhfa,
    All,
}

impl std::str::FromStr for GradcheckScope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tensor-core" => Ok(GradcheckScope::TensorCore),
            "mil" => Ok(GradcheckScope::Mil),
            "mhfa" => Ok(GradcheckScope::Mhfa),
            "all" => Ok(GradcheckScope::All),
            other => Err(format!("unknown gradcheck scope `{other}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub entries: Vec<OpCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&OpCheck> {
        self.entries.iter().filter(|e| e.max_rel_err >= self.tolerance).collect()
    }
}

/// Relative error with an absolute floor so near-zero gradients compare on
/// the finite-difference noise scale instead of blowing up.
pub fn rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4)
}

/// Compare an analytic gradient against central finite differences of `f` at
/// the listed coordinates (all coordinates when `coords` is empty).
pub fn check_scalar_fn(
    name: impl Into<String>,
    input: &Matrix,
    coords: &[usize],
    mut f: impl FnMut(&Matrix) -> f64,
    analytic: &Matrix,
) -> OpCheck {
    let mut worst = 0.0f64;
    if coords.is_empty() {
        let fd = finite_difference_gradient(&mut f, input, FD_STEP);
        for i in 0..input.data().len() {
            worst = worst.max(rel_err(analytic.data()[i], fd.data()[i]));
        }
    } else {
        let mut probe = input.clone();
        for &i in coords {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - FD_STEP;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
    }
    OpCheck { name: name.into(), max_rel_err: worst }
}

fn sample_coords(len: usize, k: usize, rng: &mut ChaCha12Rng) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    let mut picked = Vec::with_capacity(k);
    while picked.len() < k {
        let c = rng.gen_range(0..len);
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked
}

/// One tensor-op check: `graph` turns the input leaf into a scalar loss.
fn check_op(
    name: &str,
    rng: &mut ChaCha12Rng,
    input_gen: impl Fn(&mut ChaCha12Rng) -> Matrix,
    graph: impl Fn(&mut Tape, NodeId) -> NodeId,
) -> OpCheck {
    let mut worst = 0.0f64;
    for _ in 0..RANDOM_POINTS {
        let x0 = input_gen(rng);
        let mut tape = Tape::new();
        let leaf = tape.leaf(x0.clone(), true);
        let loss = graph(&mut tape, leaf);
        tape.backward(loss).expect("suite losses are scalar");
        let analytic = tape.grad(leaf).clone();

        let entry = check_scalar_fn(
            name,
            &x0,
            &[],
            |x| {
                let mut t = Tape::new();
                let l = t.leaf(x.clone(), false);
                let node = graph(&mut t, l);
                t.value(node).get(0, 0)
            },
            &analytic,
        );
        worst = worst.max(entry.max_rel_err);
    }
    OpCheck { name: name.to_string(), max_rel_err: worst }
}

/// Scalarize via RSS against a fixed target so upstream gradients vary.
fn rss_against(tape: &mut Tape, node: NodeId, target: &Matrix) -> NodeId {
    let t = tape.constant(target.clone());
    tape.rss_loss(node, t).expect("shapes match")
}

pub fn tensor_core_suite(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "gradcheck-tensor"));
    let mut checks = Vec::new();

    let gen_3x4 = |rng: &mut ChaCha12Rng| Matrix::uniform(3, 4, 1.0, rng);
    let gen_1x5 = |rng: &mut ChaCha12Rng| Matrix::uniform(1, 5, 1.0, rng);

    {
        let other = Matrix::uniform(4, 2, 1.0, &mut rng);
        let target = Matrix::uniform(3, 2, 1.0, &mut rng);
        checks.push(check_op("matmul (lhs)", &mut rng, gen_3x4, move |t, x| {
            let b = t.constant(other.clone());
            let p = t.matmul(x, b).unwrap();
            rss_against(t, p, &target)
        }));
    }
    {
        let other = Matrix::uniform(2, 3, 1.0, &mut rng);
        let target = Matrix::uniform(2, 4, 1.0, &mut rng);
        checks.push(check_op("matmul (rhs)", &mut rng, gen_3x4, move |t, x| {
            let a = t.constant(other.clone());
            let p = t.matmul(a, x).unwrap();
            rss_against(t, p, &target)
        }));
    }
    type BinaryBuild = fn(&mut Tape, NodeId, NodeId) -> NodeId;
    let binary_ops: [(&str, BinaryBuild); 4] = [
        ("add", |t, a, b| t.add(a, b).unwrap()),
        ("sub (lhs)", |t, a, b| t.sub(a, b).unwrap()),
        ("sub (rhs)", |t, a, b| t.sub(b, a).unwrap()),
        ("hadamard", |t, a, b| t.hadamard(a, b).unwrap()),
    ];
    for (name, f) in binary_ops {
        let other = Matrix::uniform(3, 4, 1.0, &mut rng);
        let target = Matrix::uniform(3, 4, 1.0, &mut rng);
        checks.push(check_op(name, &mut rng, gen_3x4, move |t, x| {
            let b = t.constant(other.clone());
            let out = f(t, x, b);
            rss_against(t, out, &target)
        }));
    }

    // Unary elementwise. relu/abs draw away from the kink at 0.
    let shifted = |rng: &mut ChaCha12Rng| {
        Matrix::uniform(3, 4, 1.0, rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
    };
    type UnaryBuild = fn(&mut Tape, NodeId) -> NodeId;
    let unary_ops: [(&str, UnaryBuild, bool); 6] = [
        ("tanh", |t, x| t.tanh(x), false),
        ("sigmoid", |t, x| t.sigmoid(x), false),
        ("relu", |t, x| t.relu(x), true),
        ("abs", |t, x| t.abs(x), true),
        ("scale_const", |t, x| t.scale_const(x, -2.5), false),
        ("transpose", |t, x| t.transpose(x), false),
    ];
    for (name, f, away_from_kink) in unary_ops {
        let target = Matrix::uniform(3, 4, 1.0, &mut rng);
        checks.push(check_op(
            name,
            &mut rng,
            |r| if away_from_kink { shifted(r) } else { gen_3x4(r) },
            move |t, x| {
                let out = f(t, x);
                let target = if name == "transpose" { target.transpose() } else { target.clone() };
                rss_against(t, out, &target)
            },
        ));
    }

    // sign: zero gradient everywhere by definition; away from 0 the finite
    // difference agrees exactly.
    {
        let target = Matrix::uniform(3, 4, 1.0, &mut rng);
        checks.push(check_op("sign", &mut rng, shifted, move |t, x| {
            let out = t.sign(x);
            rss_against(t, out, &target)
        }));
    }

    // pow_const on positive inputs (square and cube root as used by PTS).
    for exponent in [2.0, 1.0 / 3.0] {
        let target = Matrix::uniform(3, 4, 1.0, &mut rng);
        let gen_pos = |rng: &mut ChaCha12Rng| Matrix::uniform(3, 4, 1.0, rng).map(|v| v.abs() + 0.2);
        checks.push(check_op(
            &format!("pow_const ({exponent:.3})"),
            &mut rng,
            gen_pos,
            move |t, x| {
                let out = t.pow_const(x, exponent).unwrap();
                rss_against(t, out, &target)
            },
        ));
    }

    {
        // Fixed mask via a fixed per-build rng seed, so the finite-difference
        // rebuilds see the identical dropout pattern.
        let mask_seed = rng.gen::<u64>();
        let target = Matrix::uniform(3, 4, 1.0, &mut rng);
        checks.push(check_op("dropout (train)", &mut rng, gen_3x4, move |t, x| {
            let mut mask_rng = ChaCha12Rng::seed_from_u64(mask_seed);
            let out = t.dropout(x, 0.25, true, &mut mask_rng);
            rss_against(t, out, &target)
        }));
    }

    {
        let target = Matrix::uniform(1, 5, 1.0, &mut rng).map(|v| v.abs());
        checks.push(check_op("softmax_row", &mut rng, gen_1x5, move |t, x| {
            let out = t.softmax_row(x);
            rss_against(t, out, &target)
        }));
    }

    {
        let other = Matrix::uniform(1, 4, 1.0, &mut rng);
        let target = Matrix::uniform(3, 4, 1.0, &mut rng);
        let gen_row = |rng: &mut ChaCha12Rng| Matrix::uniform(1, 4, 1.0, rng);
        checks.push(check_op("concat_rows", &mut rng, gen_row, move |t, x| {
            let c = t.constant(other.clone());
            let out = t.concat_rows(&[x, c, x]).unwrap();
            rss_against(t, out, &target)
        }));
    }

    for (name, flip) in [("rss_loss (lhs)", false), ("rss_loss (rhs)", true)] {
        let other = Matrix::uniform(1, 5, 1.0, &mut rng);
        checks.push(check_op(name, &mut rng, gen_1x5, move |t, x| {
            let b = t.constant(other.clone());
            if flip {
                t.rss_loss(b, x).unwrap()
            } else {
                t.rss_loss(x, b).unwrap()
            }
        }));
    }

    {
        checks.push(check_op("cross_entropy_loss", &mut rng, gen_1x5, |t, x| {
            let probs = t.softmax_row(x);
            t.cross_entropy_loss(probs, 2).unwrap()
        }));
    }

    checks
}

/// Gradient of the classification loss w.r.t. every MIL parameter tensor.
pub fn mil_suite(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "gradcheck-mil"));
    let arch = MILArch { d_in: 10, d_embed: 8, d_attn: 6, n_classes: 3, dropout_rate: 0.0 };
    let params = MILParams::init(&arch, derive_seed(seed, "gradcheck-mil-params"));
    let bag = Matrix::uniform(5, arch.d_in, 1.0, &mut rng);
    let label = 1usize;

    let mut tape = Tape::new();
    let nodes = params.insert(&mut tape, true);
    let out = mil::forward(&mut tape, &nodes, &arch, &bag, None).expect("valid dims");
    let loss = tape.cross_entropy_loss(out.probs, label).expect("valid class");
    tape.backward(loss).expect("scalar loss");

    let mut checks = Vec::new();
    for (idx, (name, id)) in nodes.node_list().into_iter().enumerate() {
        let analytic = tape.grad(id).clone();
        let current = params.param_list()[idx].1.clone();
        let coords = sample_coords(current.data().len(), COORDS_PER_TENSOR, &mut rng);
        let params_base = params.clone();
        let arch_c = arch.clone();
        let bag_c = bag.clone();
        let entry = check_scalar_fn(
            format!("mil.{name}"),
            &current,
            &coords,
            move |m| {
                let mut p = params_base.clone();
                *p.param_list_mut()[idx].1 = m.clone();
                let mut t = Tape::new();
                let n = p.insert(&mut t, false);
                let o = mil::forward(&mut t, &n, &arch_c, &bag_c, None).unwrap();
                let l = t.cross_entropy_loss(o.probs, label).unwrap();
                t.value(l).get(0, 0)
            },
            &analytic,
        );
        checks.push(entry);
    }
    checks
}

/// Backward-swept tape plus the named student/adaptation leaves.
type ObjectiveGraph = (Tape, Vec<(String, NodeId)>);

struct MhfaFixture {
    teacher_arch: MILArch,
    teacher: MILParams,
    student_arch: MILArch,
    student: MILParams,
    mhfa: MHFAParams,
    bag: Matrix,
    /// Teacher forward values, computed once (the teacher is frozen).
    teacher_cache: (Matrix, Matrix, Matrix, Matrix),
    label: usize,
    setting: TransferSetting,
}

impl MhfaFixture {
    fn new(seed: u64) -> MhfaFixture {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "gradcheck-mhfa"));
        // Adaptation dims at their defaults: d_t 768, d_s 512, m 8, d' 256.
        let teacher_arch =
            MILArch { d_in: 24, d_embed: 768, d_attn: 48, n_classes: 2, dropout_rate: 0.0 };
        let student_arch =
            MILArch { d_in: 24, d_embed: 512, d_attn: 48, n_classes: 2, dropout_rate: 0.0 };
        let teacher = MILParams::init(&teacher_arch, derive_seed(seed, "gc-teacher"));
        let student = MILParams::init(&student_arch, derive_seed(seed, "gc-student"));
        let mhfa = MHFAParams::init(768, 512, 8, 256, PTSConfig::default(), derive_seed(seed, "gc-mhfa"));
        let bag = Matrix::uniform(4, 24, 1.0, &mut rng);
        let setting = TransferSetting {
            method: TransferMethod::Mhfa,
            alpha: 0.1,
            source_tag: "gradcheck-src".into(),
            target_tag: "gradcheck-tgt".into(),
            teacher_arch: teacher_arch.clone(),
            student_arch: student_arch.clone(),
        };

        let mut tape = Tape::new();
        let teacher_nodes = teacher.insert(&mut tape, false);
        let out = mil::forward(&mut tape, &teacher_nodes, &teacher_arch, &bag, None).unwrap();
        let teacher_cache = (
            tape.value(out.attention).clone(),
            tape.value(out.bag_feature).clone(),
            tape.value(out.probs).clone(),
            tape.value(out.logits_raw).clone(),
        );

        MhfaFixture {
            teacher_arch,
            teacher,
            student_arch,
            student,
            mhfa,
            bag,
            teacher_cache,
            label: 0,
            setting,
        }
    }

    /// Total objective: cross-entropy + α·RSS(MHFA(h_t), h_s), teacher values
    /// from the frozen cache. Returns the loss value; `with_grads` also
    /// reports the student/adaptation leaves for gradient reads.
    fn build(&self, student: &MILParams, mhfa: &MHFAParams, with_grads: bool) -> (f64, Option<ObjectiveGraph>) {
        let mut tape = Tape::new();
        let teacher_out = MILOutputs {
            attention: tape.constant(self.teacher_cache.0.clone()),
            bag_feature: tape.constant(self.teacher_cache.1.clone()),
            probs: tape.constant(self.teacher_cache.2.clone()),
            logits_raw: tape.constant(self.teacher_cache.3.clone()),
        };
        let student_nodes = student.insert(&mut tape, with_grads);
        let student_out =
            mil::forward(&mut tape, &student_nodes, &self.student_arch, &self.bag, None).unwrap();
        let mhfa_nodes = mhfa.insert(&mut tape, with_grads);
        let task = tape.cross_entropy_loss(student_out.probs, self.label).unwrap();
        let total = transfer_loss(
            &mut tape,
            &self.setting,
            &teacher_out,
            &student_out,
            Some(&mhfa_nodes),
            &mhfa.pts,
            None,
            task,
        )
        .unwrap();
        let value = tape.value(total).get(0, 0);
        if !with_grads {
            return (value, None);
        }
        tape.backward(total).unwrap();
        let mut named: Vec<(String, NodeId)> = student_nodes
            .node_list()
            .into_iter()
            .map(|(n, id)| (format!("objective.{n}"), id))
            .collect();
        named.extend(
            mhfa_nodes
                .node_list()
                .into_iter()
                .map(|(n, id)| (format!("objective.{n}"), id)),
        );
        (value, Some((tape, named)))
    }

    /// Max |gradient| over the teacher parameter leaves when the teacher runs
    /// on the objective tape directly (detachment must keep it at zero).
    fn teacher_leak(&self) -> f64 {
        let mut tape = Tape::new();
        let teacher_nodes = self.teacher.insert(&mut tape, true);
        let teacher_out =
            mil::forward(&mut tape, &teacher_nodes, &self.teacher_arch, &self.bag, None).unwrap();
        let student_nodes = self.student.insert(&mut tape, true);
        let student_out =
            mil::forward(&mut tape, &student_nodes, &self.student_arch, &self.bag, None).unwrap();
        let mhfa_nodes = self.mhfa.insert(&mut tape, true);
        let task = tape.cross_entropy_loss(student_out.probs, self.label).unwrap();
        let total = transfer_loss(
            &mut tape,
            &self.setting,
            &teacher_out,
            &student_out,
            Some(&mhfa_nodes),
            &self.mhfa.pts,
            None,
            task,
        )
        .unwrap();
        tape.backward(total).unwrap();
        teacher_nodes
            .node_list()
            .iter()
            .map(|(_, id)| tape.grad(*id).max_abs())
            .fold(0.0f64, f64::max)
    }
}

/// Full-objective check over every student and adaptation tensor, plus a
/// teacher-detachment entry (max |teacher gradient|, expected 0).
pub fn mhfa_suite(seed: u64) -> Vec<OpCheck> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, "gradcheck-mhfa-coords"));
    let fixture = MhfaFixture::new(seed);
    let (_, grads) = fixture.build(&fixture.student, &fixture.mhfa, true);
    let (tape, named) = grads.expect("grads requested");

    let mut checks = Vec::new();
    let student_tensors = fixture.student.param_list().len();
    for (slot, (name, id)) in named.iter().enumerate() {
        let analytic = tape.grad(*id).clone();
        let current: Matrix = if slot < student_tensors {
            fixture.student.param_list()[slot].1.clone()
        } else {
            fixture.mhfa.param_list()[slot - student_tensors].1.clone()
        };
        let coords = sample_coords(current.data().len(), COORDS_PER_TENSOR, &mut rng);
        // Probe copies are cloned once per tensor; the FD closure swaps in
        // the perturbed matrix.
        let mut probe_student = fixture.student.clone();
        let mut probe_mhfa = fixture.mhfa.clone();
        let entry = check_scalar_fn(
            name.clone(),
            &current,
            &coords,
            |m| {
                if slot < student_tensors {
                    *probe_student.param_list_mut()[slot].1 = m.clone();
                } else {
                    *probe_mhfa.param_list_mut()[slot - student_tensors].1 = m.clone();
                }
                fixture.build(&probe_student, &probe_mhfa, false).0
            },
            &analytic,
        );
        checks.push(entry);
    }

    checks.push(OpCheck {
        name: "objective.teacher-detachment".into(),
        max_rel_err: fixture.teacher_leak(),
    });

    checks
}

pub fn run_gradcheck(scope: GradcheckScope, seed: u64) -> GradcheckReport {
    let mut entries = Vec::new();
    if matches!(scope, GradcheckScope::TensorCore | GradcheckScope::All) {
        entries.extend(tensor_core_suite(seed));
    }
    if matches!(scope, GradcheckScope::Mil | GradcheckScope::All) {
        entries.extend(mil_suite(seed));
    }
    if matches!(scope, GradcheckScope::Mhfa | GradcheckScope::All) {
        entries.extend(mhfa_suite(seed));
    }
    GradcheckReport { entries, tolerance: GRADCHECK_TOL }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_suite_meets_op_tolerance() {
        let checks = tensor_core_suite(0);
        assert!(checks.len() >= 15);
        for c in &checks {
            assert!(c.max_rel_err < OP_TOL, "{}: {}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn mil_suite_passes() {
        for c in mil_suite(0) {
            assert!(c.max_rel_err < GRADCHECK_TOL, "{}: {}", c.name, c.max_rel_err);
        }
    }

    #[test]
    fn injected_wrong_gradient_is_caught() {
        // Harness sensitivity: a deliberately wrong analytic gradient for
        // f(x) = Σx² must blow past the tolerance.
        let x = Matrix::from_rows(&[&[0.7, -1.2, 2.0]]).unwrap();
        let wrong = x.map(|v| 3.0 * v); // true gradient is 2x
        let entry = check_scalar_fn(
            "injected-fault",
            &x,
            &[],
            |m| m.data().iter().map(|v| v * v).sum(),
            &wrong,
        );
        let report = GradcheckReport { entries: vec![entry], tolerance: GRADCHECK_TOL };
        assert!(!report.passed());
        assert_eq!(report.failures().len(), 1);
    }

    #[test]
    fn report_pass_fail_logic() {
        let report = GradcheckReport {
            entries: vec![OpCheck { name: "ok".into(), max_rel_err: 1e-9 }],
            tolerance: GRADCHECK_TOL,
        };
        assert!(report.passed());
    }
}
