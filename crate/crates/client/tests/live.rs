use std::sync::Arc;

use futures::StreamExt;
use reqwest::StatusCode;
use tokio::sync::oneshot;

use cowork_client::Client;
use cowork_core::affect::Metric;
use cowork_core::executor::ExecState;
use cowork_core::scenario::{ControlCommand, Scenario};
use cowork_core::system::{default_classifier, SimConfig, Simulation};
use cowork_core::world::Block;
use cowork_server::{serve, AppState, ServerConfig};

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn client_drives_live_server() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("events.jsonl");
    let cfg = SimConfig { seed: 5, log_path: Some(log.clone()), ..SimConfig::default() };
    let sim = Simulation::new(Scenario::default(), Arc::new(default_classifier()), cfg).unwrap();
    let state = AppState::new(sim, &ServerConfig::default());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let port = listener.local_addr().unwrap().port();
    let (tx, rx) = oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, state, async {
        let _ = rx.await;
    }));

    let c = Client::local(port);
    let plan = c.plan().await.unwrap();
    assert_eq!(plan.plan.len(), 5);

    let out = c.claim(Block::Green).await.unwrap();
    assert!(out.status.claimed.contains(&Block::Green));
    assert!(out.status.plan[out.status.step_index..].iter().all(|a| !a.mentions(Block::Green)));

    let err = c.control(ControlCommand::Resume).await.unwrap_err();
    assert_eq!(err.status(), Some(StatusCode::CONFLICT));

    c.affect_override(Metric::Stress, 0.9).await.unwrap();
    assert!(c.affective().await.unwrap().stress <= 1.0);
    assert!(c.alerts(0).await.unwrap().len() <= 1);

    let mut stream = Box::pin(c.stream().await.unwrap());
    let first = stream.next().await.unwrap().unwrap();
    assert_eq!(first.topic, "plan");
    drop(stream);

    let stopping = c.control(ControlCommand::Stop).await.unwrap();
    assert_eq!(stopping.status.state, ExecState::Running);

    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
    assert!(std::fs::metadata(&log).unwrap().len() > 0);
}

#[tokio::test]
async fn transport_error_when_no_server() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    let err = Client::local(port).plan().await.unwrap_err();
    assert!(err.status().is_none());
}
