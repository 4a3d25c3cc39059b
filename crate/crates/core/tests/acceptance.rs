//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use mapek_core::detectors::{
    detect_cusum, ensemble, CusumParams, CusumState, DetectorId, DetectorVote, EnsembleContext, Pca, SeverityScale, ZScoreDetector,
    ZScoreParams,
};
use mapek_core::executor::Actuator;
use mapek_core::gateway::{router, GatewayState};
use mapek_core::knowledge::{audit_references, replay, EntryKind};
use mapek_core::planner::{assess, hr_weighted_sum, ActionKind, ActionPlan, ActionStep, RiskClass, RiskSubtype, SubtypeWeights};
use mapek_core::types::{AnomalyKind, Layer, ServiceId, Signature, Target};

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn s1_autonomous_remediation() -> Outcome {
    let mut c = controller("s1_memory_leak", "s1_config", None);
    let svc = ServiceId::new("svc-a");
    let window = c.config().monitor.window_len;
    let baseline = c.sim().spec(&svc).unwrap().baseline.mem_mb;

    let mut saturated_at = None;
    let mut remediated_at = None;
    while remediated_at.is_none() && c.sim().now() < 200 {
        let now = c.sim().now();
        if saturated_at.is_none() && c.sim().state(&svc).unwrap().saturated() {
            saturated_at = Some(now);
        }
        c.run_cycle().map_err(|e| e.to_string())?;
        let restarted = of_kind(&entries(&c), EntryKind::StepApplied)
            .iter()
            .any(|e| str_at(&e.payload, "action_kind") == "restart_service" && str_at(&e.payload, "target") == "svc-a");
        if restarted {
            remediated_at = Some(now);
        }
    }
    let sat = saturated_at.ok_or("svc-a never saturated")?;
    let fixed = remediated_at.ok_or("restart_service never applied to svc-a")?;
    check(fixed >= sat && fixed - sat <= 2 * window, || format!("saturated at {sat}, restarted at {fixed}: more than 2 windows"))?;

    let journal = entries(&c);
    let anomalies = of_kind(&journal, EntryKind::Anomaly);
    check(anomalies.iter().any(|e| e.payload["signature"]["target"] == "svc-a"), || "no anomaly journaled for svc-a".into())?;

    let after = c.sim().state(&svc).unwrap().mem_mb;
    check(after == baseline, || format!("mem {after} after restart, baseline {baseline}"))?;
    for _ in 0..50 {
        c.run_cycle().map_err(|e| e.to_string())?;
        let mem = c.sim().state(&svc).unwrap().mem_mb;
        check((mem - baseline).abs() <= 0.1 * baseline, || format!("mem {mem} left the 10% band at tick {}", c.sim().now()))?;
    }
    let requests = of_kind(&entries(&c), EntryKind::ApprovalRequest).len();
    check(requests == 0, || format!("{requests} approval requests"))?;
    Ok(format!("saturated t={sat}, restart t={fixed}, mem held at {baseline} for 50 ticks, 0 approval requests"))
}

async fn body_json(resp: axum::response::Response) -> Value {
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    serde_json::from_slice(&bytes).unwrap()
}

fn s2_human_gate() -> Outcome {
    let mut c = controller("s2_cert_expiry", "s2_config", None);
    let svc = ServiceId::new("svc-b");
    c.run(45).map_err(|e| e.to_string())?;

    let journal = entries(&c);
    let plan = of_kind(&journal, EntryKind::Plan)
        .into_iter()
        .find(|e| e.payload["selected"] == true && e.payload["signature"]["kind"] == "cert_expiring")
        .ok_or("no selected cert plan")?;
    let kinds: Vec<&str> = plan.payload["steps"].as_array().unwrap().iter().map(|s| str_at(s, "action_kind")).collect();
    check(kinds == ["backup", "rotate_certificate"], || format!("plan steps {kinds:?}"))?;
    let plan_id = str_at(&plan.payload, "plan_id").to_string();

    let assessment =
        of_kind(&journal, EntryKind::Assessment).into_iter().find(|e| str_at(&e.payload, "plan_id") == plan_id).ok_or("no assessment")?;
    check(assessment.payload["hr_weighted_sum"] == 1.0 && assessment.payload["gated"] == true, || {
        format!("assessment {}", assessment.payload)
    })?;
    let hr_applied = |c: &mapek_core::controller::Controller| {
        of_kind(&entries(c), EntryKind::StepApplied)
            .iter()
            .filter(|e| str_at(&e.payload, "action_kind") == "rotate_certificate")
            .map(|e| e.seq)
            .collect::<Vec<_>>()
    };
    check(hr_applied(&c).is_empty(), || "rotate_certificate applied before approval".into())?;

    let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().unwrap();
    let app = router(GatewayState::live(c.handle(), c.config()));
    let pending = rt.block_on(app.clone().oneshot(Request::get("/api/approvals?status=pending").body(Body::empty()).unwrap())).unwrap();
    let pending = rt.block_on(body_json(pending));
    let request_id = pending["approvals"][0]["request_id"].as_str().ok_or("gateway lists no pending approval")?.to_string();

    let post = Request::post(format!("/api/approvals/{request_id}"))
        .header("content-type", "application/json")
        .body(Body::from(json!({"decision": "approved", "decider": "human:ops"}).to_string()))
        .unwrap();
    let reply = rt.spawn(app.oneshot(post));
    let deadline = Instant::now() + Duration::from_secs(10);
    while c.wait_for_commands(Duration::from_millis(20)) == 0 {
        check(Instant::now() < deadline, || "controller never received the decision".into())?;
    }
    let resp = rt.block_on(reply).unwrap().unwrap();
    check(resp.status() == StatusCode::OK, || format!("POST answered {}", resp.status()))?;

    let journal = entries(&c);
    let decision = of_kind(&journal, EntryKind::ApprovalDecision)
        .into_iter()
        .find(|e| str_at(&e.payload, "decision") == "approved")
        .ok_or("no approved decision journaled")?
        .seq;
    let applied = hr_applied(&c);
    check(applied.len() == 1 && applied[0] > decision, || format!("HR step seqs {applied:?}, decision seq {decision}"))?;
    let cert = c.sim().state(&svc).unwrap().cert_days_remaining;
    check(cert == 365.0, || format!("cert_days_remaining {cert}"))?;
    Ok(format!("A=1.0 gated; HR step held for {} ticks, applied after POST; cert=365", c.sim().now() - plan.tick))
}

fn s3_loop_guard() -> Outcome {
    let mut c = controller("s3_degradation_loop", "s3_config", None);
    c.run(30).map_err(|e| e.to_string())?;
    let journal = entries(&c);
    let sig = json!({"kind": "range_violation", "target": "svc-c"});

    let occurrences: Vec<u64> =
        of_kind(&journal, EntryKind::Anomaly).iter().filter(|e| e.payload["signature"] == sig).map(|e| e.cycle).collect();
    check(occurrences.len() >= 3, || format!("only {} occurrences", occurrences.len()))?;
    let third = occurrences[2];

    let escalation = of_kind(&journal, EntryKind::Escalation)
        .into_iter()
        .find(|e| str_at(&e.payload, "reason") == "loop_suppressed" && e.payload["signature"] == sig)
        .ok_or("no loop_suppressed escalation")?;
    check(escalation.cycle == third, || format!("escalated at cycle {}, third recurrence at {third}", escalation.cycle))?;

    let remediated: BTreeSet<u64> = of_kind(&journal, EntryKind::StepApplied).iter().map(|e| e.cycle).collect();
    check(remediated.len() == 2 && remediated.iter().all(|&cy| cy < third), || format!("steps applied in cycles {remediated:?}"))?;
    let late_plans = of_kind(&journal, EntryKind::Plan).iter().filter(|e| e.cycle >= third).count();
    check(late_plans == 0, || format!("{late_plans} plans formulated after suppression"))?;
    Ok(format!("recurrences at cycles {occurrences:?}; suppressed and escalated at cycle {third}; no later plans"))
}

fn s4_rollback() -> Outcome {
    let mut c = controller("s4_rollback", "s4_config", None);
    let svc = ServiceId::new("svc-a");
    let mut before = None;
    let mut failed_cycle = None;
    while c.sim().now() < 60 && failed_cycle.is_none() {
        let snap = c.sim().snapshot(&svc).unwrap();
        let record = c.run_cycle().map_err(|e| e.to_string())?;
        if record.executions.contains_key("rolled_back") {
            before = Some(snap);
            failed_cycle = Some(record.cycle);
        }
    }
    let cycle = failed_cycle.ok_or("no rolled_back execution")?;
    let before = before.unwrap();
    let after = c.sim().snapshot(&svc).unwrap();

    let journal = entries(&c);
    let in_cycle = |k| of_kind(&journal, k).into_iter().filter(|e| e.cycle == cycle).collect::<Vec<_>>();
    let applied = in_cycle(EntryKind::StepApplied);
    let failed = in_cycle(EntryKind::StepFailed);
    let rollback = in_cycle(EntryKind::Rollback);
    let plan = of_kind(&journal, EntryKind::Plan).into_iter().find(|e| e.cycle == cycle && e.payload["selected"] == true).unwrap();
    let steps = plan.payload["steps"].as_array().unwrap();
    check(steps.len() == 3, || format!("{}-step plan", steps.len()))?;
    check(applied.len() == 1 && failed.len() == 1 && str_at(&failed[0].payload, "step_id") == str_at(&steps[1], "step_id"), || {
        "expected step 1 applied then step 2 failed".into()
    })?;
    check(rollback.len() == 1 && str_at(&rollback[0].payload, "status") == "rolled_back", || "missing rollback entry".into())?;
    check(before == after, || format!("pre-plan {before:?} != post-rollback {after:?}"))?;
    Ok(format!("step 2 failed at cycle {cycle}; rollback restored every invertible field"))
}

/// Straight-line rolling z-score over a trailing window.
fn zscore_reference(xs: &[f64], w: usize, k: f64) -> Vec<usize> {
    let mut alarms = Vec::new();
    for i in w..xs.len() {
        let win = &xs[i - w..i];
        let mut sum = 0.0;
        for v in win {
            sum += v;
        }
        let mean = sum / w as f64;
        let mut ss = 0.0;
        for v in win {
            ss += (v - mean) * (v - mean);
        }
        let std = (ss / w as f64).sqrt();
        let dev = (xs[i] - mean).abs();
        let hit = if std < 1e-9 { dev > 1e-9 } else { dev / std > k };
        if hit {
            alarms.push(i);
        }
    }
    alarms
}

/// Tabular two-sided CUSUM, calibrated on the leading samples.
fn cusum_reference(xs: &[f64], calibration: usize, kappa: f64, h: f64) -> Vec<usize> {
    let cal = &xs[..calibration];
    let n = calibration as f64;
    let mut sum = 0.0;
    for v in cal {
        sum += v;
    }
    let mu = sum / n;
    let mut ss = 0.0;
    for v in cal {
        ss += (v - mu) * (v - mu);
    }
    let sigma = (ss / n).sqrt().max(1e-9);
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    let mut alarms = Vec::new();
    for (i, &x) in xs.iter().enumerate().skip(calibration) {
        let z = (x - mu) / sigma;
        hi = (hi + z - kappa).max(0.0);
        lo = (lo - z - kappa).max(0.0);
        if hi.max(lo) > h {
            alarms.push(i);
            hi = 0.0;
            lo = 0.0;
        }
    }
    alarms
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn synthetic_series(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..1000)
        .map(|i| {
            let mut x = 50.0 + 2.0 * gaussian(&mut rng);
            if i >= 600 {
                x += 6.0;
            }
            if i % 97 == 13 {
                x += 15.0;
            }
            x
        })
        .collect()
}

/// Jacobi eigenvalues of a symmetric 3x3 matrix, descending.
#[allow(clippy::needless_range_loop)]
fn jacobi_eigenvalues(mut a: [[f64; 3]; 3]) -> [f64; 3] {
    for _ in 0..100 {
        let (mut p, mut q, mut off) = (0, 1, 0.0);
        for i in 0..3 {
            for j in i + 1..3 {
                if a[i][j].abs() > off {
                    off = a[i][j].abs();
                    p = i;
                    q = j;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
        let theta = 0.5 * (2.0 * a[p][q]).atan2(a[q][q] - a[p][p]);
        let (s, c) = theta.sin_cos();
        let mut next = a;
        for k in 0..3 {
            next[k][p] = c * a[k][p] - s * a[k][q];
            next[k][q] = s * a[k][p] + c * a[k][q];
        }
        let b = next;
        for k in 0..3 {
            next[p][k] = c * b[p][k] - s * b[q][k];
            next[q][k] = s * b[p][k] + c * b[q][k];
        }
        a = next;
    }
    let mut ev = [a[0][0], a[1][1], a[2][2]];
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn pca_fixture(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..50)
        .map(|_| {
            let f = 5.0 * gaussian(&mut rng);
            let g = 2.0 * gaussian(&mut rng);
            vec![f + 0.3 * gaussian(&mut rng), 0.5 * f + g, g - f + gaussian(&mut rng)]
        })
        .collect()
}

fn detector_oracles() -> Outcome {
    let mut alarms = (0, 0);
    for seed in 1..=5 {
        let xs = synthetic_series(seed);

        let mut z = ZScoreDetector::new(ZScoreParams { window: 60, k: 3.0 });
        let got: Vec<usize> = xs.iter().enumerate().filter_map(|(i, &x)| z.observe(x).filter(|v| v.anomalous).map(|_| i)).collect();
        let want = zscore_reference(&xs, 60, 3.0);
        check(got == want, || format!("seed {seed}: z-score alarms {got:?} != reference {want:?}"))?;
        alarms.0 += got.len();

        let params = CusumParams { kappa: 0.5, h: 5.0, calibration: 30 };
        let mut state = CusumState::new();
        let got: Vec<usize> =
            xs.iter().enumerate().filter_map(|(i, &x)| detect_cusum(&mut state, &params, x).filter(|v| v.anomalous).map(|_| i)).collect();
        let want = cusum_reference(&xs, 30, 0.5, 5.0);
        check(got == want, || format!("seed {seed}: CUSUM alarms {got:?} != reference {want:?}"))?;
        alarms.1 += got.len();
    }

    let mut worst: f64 = 0.0;
    for seed in 10..15 {
        let rows = pca_fixture(seed);
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..3).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let mut cov = [[0.0; 3]; 3];
        for (i, row) in cov.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / n;
            }
        }
        let want = jacobi_eigenvalues(cov);
        let fit = Pca::fit(&rows, 3).map_err(|e| e.to_string())?;
        check(fit.eigenvalues.len() == 3, || "PCA returned fewer than 3 eigenvalues".into())?;
        for (g, w) in fit.eigenvalues.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    check(worst <= 1e-6, || format!("PCA eigenvalue error {worst:e}"))?;

    let ids = [DetectorId::Threshold, DetectorId::Cusum, DetectorId::Zscore, DetectorId::Pca, DetectorId::Coupling];
    let ctx = EnsembleContext {
        id: "a".into(),
        target: Target::Service("svc".into()),
        metric: None,
        layer: Layer::Dynamic,
        tick: 0,
        scale: SeverityScale { threshold: 0.5, zscore: 3.0, cusum: 5.0, pca: 100.0, coupling: 0.5 },
    };
    let mut rows = 0;
    for n in 1..=5 {
        for mask in 0u32..(1 << n) {
            let votes: Vec<DetectorVote> =
                (0..n).map(|i| DetectorVote { detector_id: ids[i], anomalous: mask & (1 << i) != 0, score: 1.0 + i as f64 }).collect();
            let hits = mask.count_ones() as usize;
            let emitted = ensemble(&votes, &ctx).is_some();
            check(emitted == (2 * hits > n), || format!("{n} detectors, mask {mask:b}: emitted={emitted}"))?;
            rows += 1;
        }
    }
    let named = |flags: &[bool]| {
        let votes: Vec<DetectorVote> =
            flags.iter().zip(ids).map(|(&a, d)| DetectorVote { detector_id: d, anomalous: a, score: 1.0 }).collect();
        ensemble(&votes, &ctx).is_some()
    };
    check(!named(&[true, false, false]) && named(&[true, true, false]) && !named(&[true, false]), || "named truth-table rows".into())?;
    Ok(format!("z-score {} and CUSUM {} alarms match reference; PCA max error {worst:.1e}; {rows} ensemble rows", alarms.0, alarms.1))
}

const HR_KINDS: [ActionKind; 3] = [ActionKind::RotateCertificate, ActionKind::UpgradeService, ActionKind::RedistributeKeys];

fn plan_of(kinds: &[ActionKind], weights: &SubtypeWeights) -> ActionPlan {
    let steps =
        kinds.iter().enumerate().map(|(i, &k)| ActionStep::new(format!("p/s{i}"), k, ServiceId::new("svc"), json!({}), weights)).collect();
    ActionPlan {
        plan_id: "p".into(),
        anomaly_refs: vec![],
        signature: Signature::new(AnomalyKind::RangeViolation, Target::Service("svc".into())),
        template_id: "t".into(),
        steps,
        impact_estimate: 1.0,
        rank_score: 0.0,
    }
}

fn weights_from(w: [f64; 3]) -> SubtypeWeights {
    RiskSubtype::ALL.into_iter().zip(w).collect()
}

fn gate_algebra() -> Outcome {
    let kind = prop::sample::select(ActionKind::ALL.to_vec());
    let eighths = |hi: u32| (1..=hi).prop_map(|k| k as f64 / 8.0);
    let scale = prop::sample::select(vec![0.0625, 0.125, 0.25, 0.5, 0.75, 1.5, 2.0, 3.0, 5.0, 10.0, 16.0]);
    let strategy = (
        prop::collection::vec(kind, 0..10),
        [eighths(80), eighths(80), eighths(80)],
        eighths(160),
        eighths(160),
        scale,
        prop::sample::select(HR_KINDS.to_vec()),
    );
    let mut runner = TestRunner::new(PropConfig { cases: 1000, failure_persistence: None, ..PropConfig::default() });
    runner
        .run(&strategy, |(kinds, w, a1, a2, c, extra)| {
            let weights = weights_from(w);
            let plan = plan_of(&kinds, &weights);
            let a = hr_weighted_sum(&plan.steps, &weights);

            let mut longer = kinds.clone();
            longer.push(extra);
            let grown = hr_weighted_sum(&plan_of(&longer, &weights).steps, &weights);
            prop_assert!(grown > a, "adding an HR step moved A from {} to {}", a, grown);
            let hr_free: Vec<ActionKind> = kinds.iter().copied().filter(|k| !HR_KINDS.contains(k)).collect();
            prop_assert_eq!(hr_weighted_sum(&plan_of(&hr_free, &weights).steps, &weights), 0.0);

            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            if assess(&plan, hi, &weights).gated {
                prop_assert!(assess(&plan, lo, &weights).gated, "gated at alpha {} but not at {}", hi, lo);
            }

            let scaled = weights_from(w.map(|x| x * c));
            let scaled_plan = plan_of(&kinds, &scaled);
            for alpha in [a1, a2, a] {
                let base = assess(&plan, alpha, &weights).gated;
                let after = assess(&scaled_plan, alpha * c, &scaled).gated;
                if base != after {
                    return Err(TestCaseError::fail(format!("scaling by {c} flipped the gate at alpha {alpha}")));
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let kinds: Vec<ActionKind> = (0..rng.random_range(0..10)).map(|_| ActionKind::ALL[rng.random_range(0..9)]).collect();
        let w = [rng.random_range(0.01..10.0), rng.random_range(0.01..10.0), rng.random_range(0.01..10.0)];
        let alpha = rng.random_range(0.01..20.0);
        let c = rng.random_range(0.01..100.0);
        let weights = weights_from(w);
        let plan = plan_of(&kinds, &weights);
        let a = hr_weighted_sum(&plan.steps, &weights);
        if (a - alpha).abs() <= 1e-9 * alpha {
            continue;
        }
        let scaled = weights_from(w.map(|x| x * c));
        check(assess(&plan, alpha, &weights).gated == assess(&plan_of(&kinds, &scaled), alpha * c, &scaled).gated, || {
            format!("real-valued scaling by {c} flipped the gate")
        })?;
        check(plan.steps.iter().filter(|s| s.risk_class == RiskClass::HR).count() == plan.hr_steps(), || "hr_steps".into())?;
    }
    Ok("A strictly grows per HR step; gate monotone in alpha; joint scaling preserves 2000 gate decisions".into())
}

fn determinism_and_audit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut total = 0;
    for (scenario, config, ticks) in SCENARIOS {
        let mut bytes = Vec::new();
        for run in 0..2 {
            let path = dir.path().join(format!("{scenario}-{run}.jsonl"));
            let mut c = controller(scenario, config, Some(&path));
            c.run(ticks).map_err(|e| e.to_string())?;
            if scenario == "s2_cert_expiry" {
                let id = c.executor().pending().first().map(|r| r.request_id.clone()).ok_or("S2 has no pending approval")?;
                c.resolve_approval(&id, mapek_core::executor::Decision::Approved, "human:ops").map_err(|e| e.to_string())?;
                c.run(5).map_err(|e| e.to_string())?;
            }
            let live = c.journal().digest();
            drop(c);
            let replayed = replay(&path).map_err(|e| e.to_string())?;
            check(replayed.state.digest() == live, || format!("{scenario}: replay digest differs from live"))?;
            let bad = unapproved_hr_steps(&replayed.entries);
            check(bad.is_empty(), || format!("{scenario}: HR steps without approval at seqs {bad:?}"))?;
            let violations = audit_references(&replayed.entries);
            check(violations.is_empty(), || format!("{scenario}: {violations:?}"))?;
            bytes.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        }
        check(bytes[0] == bytes[1], || format!("{scenario}: journals differ between runs"))?;
        total += bytes[0].iter().filter(|&&b| b == b'\n').count();
    }
    Ok(format!("4 scenarios x 2 runs byte-identical ({total} entries); replay == live; 0 unapproved HR steps"))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("S1 autonomous MR remediation", s1_autonomous_remediation),
        ("S2 high-risk approval gate", s2_human_gate),
        ("S3 degradation loop guard", s3_loop_guard),
        ("S4 rollback to pre-plan state", s4_rollback),
        ("detector oracle suite", detector_oracles),
        ("gate algebra properties", gate_algebra),
        ("determinism and audit", determinism_and_audit),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {}: {name} ({detail})", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({why})", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
