// SPDX-License-Identifier: Apache-2.0

//! Session event fuzzing against a reference transition table.

use sandbox_core::backend::GuestInfo;
use sandbox_core::config::CatalogFile;
use sandbox_core::gateway::{ImageFormat, ImageRef};
use sandbox_core::lifecycle::{
    route, ArtifactKind, ArtifactRecord, RouteTarget, Session, SessionState, TerminationCause,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    SetConfig,
    UploadOk,
    UploadFail,
    VmExit,
    Abort,
    Artifact,
}

impl Step {
    pub const ALL: [Step; 6] = [
        Step::SetConfig,
        Step::UploadOk,
        Step::UploadFail,
        Step::VmExit,
        Step::Abort,
        Step::Artifact,
    ];
}

fn image() -> ImageRef {
    ImageRef {
        stored_path: "/nonexistent/image.qcow2".into(),
        size_bytes: 1024,
        format: ImageFormat::Qcow2,
        upload_seconds: 0.1,
    }
}

fn guest() -> GuestInfo {
    GuestInfo {
        pid: 1,
        config_id: "c".into(),
        display: "127.0.0.1:1".parse().unwrap(),
        started_ms: 0,
    }
}

/// Applies one step; returns whether the session accepted it.
fn apply(s: &mut Session, st: Step) -> bool {
    match st {
        Step::SetConfig => {
            let (catalog, _) = CatalogFile::default_catalog().into_parts().unwrap();
            s.set_config(catalog.find("x86_64-kvm-base").unwrap().clone()).is_ok()
        }
        Step::UploadOk => s.on_upload_complete(image(), |_| Ok::<_, String>(guest())).is_ok(),
        Step::UploadFail => {
            let before = s.state();
            let _ = s.on_upload_complete(image(), |_| Err::<GuestInfo, _>("boom"));
            before != s.state()
        }
        Step::VmExit => s.on_vm_exit(TerminationCause::GuestExited { status: Some(0) }).is_ok(),
        Step::Abort => s.abort(TerminationCause::Stopped).is_ok(),
        Step::Artifact => {
            let r = ArtifactRecord::from_content("f", ArtifactKind::File, b"x", s.run_id()).unwrap();
            s.record_artifact(r).is_ok()
        }
    }
}

pub fn reference(state: SessionState, st: Step) -> Option<SessionState> {
    use SessionState::*;
    match (state, st) {
        (Loader, Step::SetConfig) => Some(Loader),
        (Loader, Step::UploadOk) => Some(VmRunning),
        (Loader, Step::UploadFail | Step::Abort) => Some(Terminated),
        (VmRunning, Step::VmExit) => Some(Terminated),
        (VmRunning, Step::Artifact) => Some(VmRunning),
        _ => None,
    }
}

fn rank(s: SessionState) -> u8 {
    match s {
        SessionState::Loader => 0,
        SessionState::VmRunning => 1,
        SessionState::Terminated => 2,
    }
}

/// Drives a fresh session through `steps` and checks every invariant after
/// each step. Returns the distinct states visited, in order.
pub fn run(workspace_root: &std::path::Path, steps: &[Step]) -> Result<Vec<SessionState>, String> {
    let mut s = Session::new(workspace_root);
    let mut visited = vec![s.state()];
    for (i, &st) in steps.iter().enumerate() {
        let before = s.state();
        let history = s.history().len();
        let accepted = apply(&mut s, st);
        let want = reference(before, st);
        let fail = |what: &str| Err(format!("step {i} {st:?} from {before:?}: {what}"));
        if accepted != want.is_some() {
            return fail("acceptance differs from the table");
        }
        match want {
            Some(next) if s.state() != next => return fail("wrong target state"),
            None if s.state() != before || s.history().len() != history => {
                return fail("rejected event mutated the session")
            }
            _ => {}
        }
        if s.state() != *visited.last().unwrap() {
            visited.push(s.state());
        }
        let r = s.route();
        let targets = [RouteTarget::RouteLoader, RouteTarget::RouteVnc, RouteTarget::RouteGone];
        if r != route(s.state()) || targets.iter().filter(|t| **t == r).count() != 1 {
            return fail("route is not the single target for the state");
        }
        if s.guest().is_some() != (s.state() == SessionState::VmRunning) {
            return fail("guest present outside VmRunning");
        }
    }
    if visited[0] != SessionState::Loader || !visited.windows(2).all(|w| rank(w[0]) < rank(w[1])) {
        return Err(format!("visited {visited:?}"));
    }
    if s.state() == SessionState::Terminated && (s.cause().is_none() || s.timestamps().terminated_ms.is_none()) {
        return Err("terminated without cause or timestamp".into());
    }
    Ok(visited)
}
