mod common;

use std::sync::Arc;
use std::time::Duration;

use common::stub_config;
use hermes_core::lean::{CheckerConfig, CheckerError, CheckerHandle, ProofStatus, Severity};

const T: Duration = Duration::from_secs(10);

async fn handle() -> CheckerHandle {
    CheckerHandle::start(Arc::new(stub_config(None))).await.unwrap()
}

#[tokio::test]
async fn fresh_handle_is_live_with_no_requests() {
    let h = handle().await;
    assert!(h.pid() > 0);
    assert_eq!(h.requests_served(), 0);
    assert!(!h.is_dead());
}

#[tokio::test]
async fn nonexistent_executable_is_spawn_failure() {
    let c = CheckerConfig::new("/definitely/not/a/checker", std::env::temp_dir());
    let err = CheckerHandle::start(Arc::new(c)).await.err().unwrap();
    assert!(matches!(err, CheckerError::SpawnFailure { .. }), "{err}");
}

#[tokio::test]
async fn silent_checker_is_handshake_timeout() {
    let mut c = stub_config(None);
    c.startup_header = "import Mathlib\n-- @stub hang".into();
    c.startup_timeout = Duration::from_millis(300);
    let err = CheckerHandle::start(Arc::new(c)).await.err().unwrap();
    assert!(matches!(err, CheckerError::HandshakeTimeout(_)), "{err}");
}

#[tokio::test]
async fn compile_checks() {
    let mut h = handle().await;

    let r = h.check_compiles("theorem test : 1 + 1 = 2 := by sorry", T).await.unwrap();
    assert!(r.compiles());
    assert!(r.has_sorry());
    assert!(r.messages.iter().all(|m| m.severity == Severity::Warning));

    let r = h.check_compiles("theorem test : 1 + 1 = 2 :=", T).await.unwrap();
    assert!(!r.compiles());
    assert!(r.has_errors());

    let r = h.check_compiles("", T).await.unwrap();
    assert!(r.compiles());
    assert!(r.messages.is_empty());

    assert_eq!(h.requests_served(), 3);
}

#[tokio::test]
async fn positions_are_one_based_and_within_source() {
    let mut h = handle().await;
    let source = "theorem test : 1 + 1 = 2 := by sorry";
    let r = h.check_compiles(source, T).await.unwrap();
    let assembled = h.config().assemble(source);
    let lines = assembled.lines().count() as u32;
    for m in &r.messages {
        let pos = m.pos.unwrap();
        assert!(pos.line >= 1 && pos.line <= lines);
        assert!(pos.column >= 1);
    }
}

#[tokio::test]
async fn proof_checks() {
    let mut h = handle().await;
    let proved = h.check_proof("theorem test : 1 + 1 = 2 := by norm_num", T).await.unwrap();
    assert_eq!(proved.status, ProofStatus::Proved);

    let sorry = h.check_proof("theorem test : 1 + 1 = 2 := by sorry", T).await.unwrap();
    assert_eq!(sorry.status, ProofStatus::Failed);

    let slow = h
        .check_proof("theorem loop : False := by\n  -- @stub hang\n  repeat trivial", Duration::from_secs(1))
        .await
        .unwrap();
    assert_eq!(slow.status, ProofStatus::TimedOut);
    assert!(slow.report.timed_out);
}

#[tokio::test]
async fn handle_recovers_after_timeout() {
    let mut h = handle().await;
    let first_pid = h.pid();
    let r = h
        .check_proof("theorem x : True := by\n  -- @stub hang\n  trivial", Duration::from_millis(300))
        .await
        .unwrap();
    assert_eq!(r.status, ProofStatus::TimedOut);
    let r = h.check_proof("theorem x : True := by trivial", T).await.unwrap();
    assert_eq!(r.status, ProofStatus::Proved);
    assert_eq!(h.restarts(), 1);
    assert_ne!(h.pid(), first_pid);
}

#[tokio::test]
async fn every_request_gets_exactly_one_reply() {
    let mut h = handle().await;
    for i in 0..20 {
        let src = if i % 3 == 0 {
            format!("theorem t{i} : True := by sorry")
        } else {
            format!("theorem t{i} : True := by trivial")
        };
        let out = h.check_proof(&src, T).await.unwrap();
        assert_eq!(out.proved(), i % 3 != 0, "request {i}");
    }
    assert_eq!(h.requests_served(), 20);
}

#[tokio::test]
async fn status_is_monotone_in_timeout() {
    let sources = [
        "theorem a : True := by\n  -- @stub sleep 100\n  trivial",
        "theorem b : True := by\n  -- @stub sleep 100\n  sorry",
        "theorem c : True := by\n  -- @stub sleep 100\n  -- @stub error no\n  trivial",
    ];
    let mut h = handle().await;
    for src in sources {
        let base = h.check_proof(src, Duration::from_secs(2)).await.unwrap().status;
        assert_ne!(base, ProofStatus::TimedOut);
        for t in [3, 5] {
            let s = h.check_proof(src, Duration::from_secs(t)).await.unwrap().status;
            assert_eq!(s, base, "{src} at {t}s");
        }
    }
}

#[tokio::test]
async fn crash_marks_handle_dead_and_replacement_serves() {
    let mut h = handle().await;
    let err = h
        .check_proof("theorem x : True := by\n  -- @stub crash\n  trivial", T)
        .await
        .unwrap_err();
    assert!(matches!(err, CheckerError::Crashed { .. }), "{err}");
    assert!(h.is_dead());
    assert!(matches!(
        h.check_proof("theorem x : True := by trivial", T).await,
        Err(CheckerError::Dead)
    ));
    let mut replacement = handle().await;
    assert!(replacement
        .check_proof("theorem x : True := by trivial", T)
        .await
        .unwrap()
        .proved());
}

#[tokio::test]
async fn killing_the_process_mid_request_is_a_crash() {
    let mut h = handle().await;
    let pid = h.pid();
    let killer = tokio::spawn(async move {
        tokio::time::sleep(Duration::from_millis(200)).await;
        unsafe {
            libc::kill(pid as i32, libc::SIGKILL);
        }
    });
    let err = h
        .check_proof("theorem x : True := by\n  -- @stub sleep 5000\n  trivial", T)
        .await
        .unwrap_err();
    killer.await.unwrap();
    assert!(matches!(err, CheckerError::Crashed { .. }));
    let mut replacement = handle().await;
    assert!(replacement.check_proof("theorem y : True := by trivial", T).await.unwrap().proved());
}

fn tactic_script() -> impl proptest::strategy::Strategy<Value = String> {
    use proptest::prelude::*;
    let tactic = prop::sample::select(vec!["simp", "norm_num", "ring", "linarith", "omega", "rfl", "decide"]);
    (prop::collection::vec(tactic, 0..6), any::<prop::sample::Index>(), 1usize..4).prop_map(|(mut ts, at, n)| {
        for _ in 0..n {
            let i = at.index(ts.len() + 1);
            ts.insert(i, "sorry");
        }
        format!("theorem test (a b : ℕ) : a + b = b + a := by\n  {}", ts.join("\n  "))
    })
}

#[test]
fn a_hole_anywhere_is_never_proved() {
    use proptest::test_runner::{Config, TestRunner};
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    let h = std::cell::RefCell::new(rt.block_on(handle()));
    let mut runner = TestRunner::new(Config::with_cases(24));
    runner
        .run(&tactic_script(), |source| {
            let outcome = rt.block_on(h.borrow_mut().check_proof(&source, T)).unwrap();
            proptest::prop_assert!(!outcome.proved(), "{source}");
            proptest::prop_assert!(outcome.report.has_sorry(), "{source}");
            Ok(())
        })
        .unwrap();
    rt.block_on(h.borrow_mut().terminate());
}
