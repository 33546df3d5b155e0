use std::net::{IpAddr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use netpg_core::agent::{run_agent, AgentConfig, FlakySensor, PiecewiseProfile, ProfileSensor};
use netpg_core::clock::{Clock, SystemClock};
use netpg_core::collector::{energy_report, run_collection, CollectOptions, ConnectionState};
use netpg_core::inventory::parse_inventory;
use netpg_core::wire::{FrameDecoder, Message};
use tokio::io::AsyncReadExt;
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

struct Agent {
    addr: SocketAddr,
    stop: oneshot::Sender<()>,
    task: JoinHandle<()>,
}

async fn spawn_agent(ip: &str, port: u16, node_id: u16, flaky: Option<u64>) -> Agent {
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let sensor = ProfileSensor::new(clock.clone(), PiecewiseProfile::constant(500_000, 5_000));
    let driver: Box<dyn netpg_core::agent::SensorDriver> = match flaky {
        Some(n) => Box::new(FlakySensor::new(sensor, n)),
        None => Box::new(sensor),
    };
    let config = AgentConfig {
        node_id,
        bind_addr: ip.parse::<IpAddr>().unwrap(),
        listen_port: port,
        ..AgentConfig::default()
    };
    let (stop, stopped) = oneshot::channel::<()>();
    let (ready_tx, ready_rx) = oneshot::channel();
    let task = tokio::spawn(async move {
        run_agent(config, driver, clock, async { let _ = stopped.await; }, move |a| {
            let _ = ready_tx.send(a);
        })
        .await
        .unwrap();
    });
    let addr = ready_rx.await.unwrap();
    Agent { addr, stop, task }
}

async fn read_for(stream: &mut TcpStream, dur: Duration) -> (Vec<Message>, bool) {
    let mut dec = FrameDecoder::new();
    let mut out = Vec::new();
    let mut buf = [0u8; 1024];
    let deadline = tokio::time::Instant::now() + dur;
    let mut eof = false;
    loop {
        match tokio::time::timeout_at(deadline, stream.read(&mut buf)).await {
            Err(_) => break,
            Ok(Ok(0)) => {
                eof = true;
                break;
            }
            Ok(Ok(n)) => dec.push(&buf[..n]),
            Ok(Err(e)) => panic!("{e}"),
        }
    }
    while let Some(m) = dec.next_message().unwrap() {
        out.push(m);
    }
    (out, eof)
}

fn seqs(msgs: &[Message]) -> Vec<u64> {
    msgs.iter()
        .filter_map(|m| match m {
            Message::Sample(s) => Some(s.seq),
            _ => None,
        })
        .collect()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn one_second_gives_hello_then_about_ten_samples() {
    let agent = spawn_agent("127.0.0.1", 0, 7, None).await;
    let mut s = TcpStream::connect(agent.addr).await.unwrap();
    let (msgs, _) = read_for(&mut s, Duration::from_millis(1_000)).await;
    assert!(matches!(msgs[0], Message::Hello(h) if h.node_id == 7 && h.sample_period_ms == 100));
    let seq = seqs(&msgs);
    assert!((9..=11).contains(&seq.len()), "{}", seq.len());
    assert_eq!(seq, (0..seq.len() as u64).collect::<Vec<_>>());
    let _ = agent.stop.send(());
    agent.task.await.unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn collectors_get_independent_sequences_and_bye_on_shutdown() {
    let agent = spawn_agent("127.0.0.1", 0, 3, Some(4)).await;
    let mut a = TcpStream::connect(agent.addr).await.unwrap();
    tokio::time::sleep(Duration::from_millis(250)).await;
    let mut b = TcpStream::connect(agent.addr).await.unwrap();
    tokio::time::sleep(Duration::from_millis(400)).await;
    let _ = agent.stop.send(());
    let (ma, eof_a) = read_for(&mut a, Duration::from_secs(2)).await;
    let (mb, eof_b) = read_for(&mut b, Duration::from_secs(2)).await;
    agent.task.await.unwrap();
    for (msgs, eof) in [(&ma, eof_a), (&mb, eof_b)] {
        assert!(eof);
        assert!(matches!(msgs.first(), Some(Message::Hello(_))));
        assert_eq!(msgs.last(), Some(&Message::Bye));
        let seq = seqs(msgs);
        assert_eq!(seq, (0..seq.len() as u64).collect::<Vec<_>>());
    }
    assert!(seqs(&ma).len() > seqs(&mb).len());
    // every fourth read of the shared sensor faults; streams carry zero samples instead
    let zeros = ma
        .iter()
        .chain(&mb)
        .filter(|m| matches!(m, Message::Sample(s) if s.current_ua == 0))
        .count();
    assert!(zeros >= 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn collection_over_loopback_with_one_dead_host() {
    let first = spawn_agent("127.0.0.1", 0, 1, None).await;
    let port = first.addr.port();
    let mut agents = vec![first];
    for k in 2..=16u16 {
        agents.push(spawn_agent(&format!("127.0.0.{k}"), port, k, None).await);
    }
    let inv = parse_inventory("[lo]\n127.0.0.[1:16]\n127.0.0.99\n").unwrap();
    let group = inv.resolve_group("lo").unwrap();
    let series = run_collection(group, port, Duration::from_secs(2), CollectOptions::default()).await;
    assert_eq!(series.len(), 17);
    assert_eq!(series["127.0.0.99"].connection_state, ConnectionState::Lost);
    assert!(series["127.0.0.99"].samples.is_empty());
    for k in 1..=16 {
        let s = &series[&format!("127.0.0.{k}")];
        assert_eq!(s.connection_state, ConnectionState::Connected, "{s:?}");
        assert!((19..=21).contains(&s.samples.len()), "{}: {}", k, s.samples.len());
    }
    let report = energy_report(&series);
    assert_eq!(report.nodes.len(), 16);
    for n in &report.nodes {
        assert!((n.mean_power_w - 2.5).abs() < 1e-9);
    }
    for a in agents {
        let _ = a.stop.send(());
        a.task.await.unwrap();
    }
}
