use super::wire::{decode, encode, Message};
use super::*;
use crate::kernel_grad::{kernel_block_vjp, loss_gradient_with, LambdaMode, Local};
use crate::krr::LabelMatrix;
use crate::Preprocessing;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, shape: (usize, usize, usize), seed: u64) -> ImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.0 * shape.1 * shape.2;
    let px = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    ImageSet::new(n, shape.0, shape.1, shape.2, px, Preprocessing::Raw).unwrap()
}

fn random_matrix(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn partition_examples() {
    assert_eq!(partition(4, 4, 4), vec![Tile { row: 0, col: 0, rows: 4, cols: 4 }]);
    let tiles = partition(10, 10, 4);
    assert_eq!(tiles.len(), 9);
    let sizes: Vec<(usize, usize)> = tiles.iter().map(|t| (t.rows, t.cols)).collect();
    let mut expect = Vec::new();
    for r in [4, 4, 2] {
        for c in [4, 4, 2] {
            expect.push((r, c));
        }
    }
    assert_eq!(sizes, expect);
    assert!(partition(0, 5, 3).is_empty());
}

#[test]
fn partition_covers_grid_exactly_once() {
    for n in 0..=25 {
        for m in 0..=25 {
            for b in 1..=7 {
                let tiles = partition(n, m, b);
                assert_eq!(tiles.len(), n.div_ceil(b) * m.div_ceil(b));
                let mut hits = vec![0u8; n * m];
                let mut last = None;
                for t in &tiles {
                    assert!(t.rows >= 1 && t.rows <= b && t.cols >= 1 && t.cols <= b);
                    assert!(last < Some((t.row, t.col)));
                    last = Some((t.row, t.col));
                    for i in t.row..t.row + t.rows {
                        for j in t.col..t.col + t.cols {
                            hits[i * m + j] += 1;
                        }
                    }
                }
                assert!(hits.iter().all(|&h| h == 1), "{n}x{m} b={b}");
            }
        }
    }
}

#[test]
fn forward_matches_monolithic_for_any_pool() {
    for spec in [KernelSpec::fc(2), KernelSpec::convnet(2)] {
        let x = images(7, (4, 4, 1), 1);
        let y = images(5, (4, 4, 1), 2);
        let whole = kernel_matrix(&x, &y, &spec).unwrap();
        let one = assemble_forward(&x, &y, &spec, &WorkerPool::local(1), 3).unwrap();
        assert!((&one - &whole).abs().max() < 1e-10);
        for w in [2, 8] {
            let other = assemble_forward(&x, &y, &spec, &WorkerPool::local(w), 3).unwrap();
            assert_eq!(bits(other.as_slice()), bits(one.as_slice()), "{w} workers");
        }
        let inline = assemble_forward(&x, &y, &spec, &Inline, 3).unwrap();
        assert_eq!(bits(inline.as_slice()), bits(one.as_slice()));
    }
}

#[test]
fn killed_worker_is_retried_elsewhere() {
    let x = images(6, (4, 4, 1), 3);
    let spec = KernelSpec::convnet(1);
    // whichever worker first picks up task 0 dies holding it
    let hook: FaultHook = Arc::new(|_, t, a| if t == 0 && a == 0 { Fault::Die } else { Fault::None });
    let pool = WorkerPool::local_with_faults(3, Some(hook));
    let k = assemble_forward(&x, &x, &spec, &pool, 2).unwrap();
    assert!((&k - kernel_matrix(&x, &x, &spec).unwrap()).abs().max() < 1e-10);
    let deadline = Instant::now() + Duration::from_secs(5);
    while pool.live_workers() > 2 && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(5));
    }
    assert_eq!(pool.live_workers(), 2);
}

#[test]
fn repeated_failures_abort() {
    let x = images(4, (1, 1, 3), 4);
    let hook: FaultHook = Arc::new(|_, t, _| if t == 1 { Fault::Fail } else { Fault::None });
    let pool = WorkerPool::local_with_faults(2, Some(hook));
    match assemble_forward(&x, &x, &KernelSpec::fc(1), &pool, 2) {
        Err(Error::AssemblyAborted { task_id: 1, attempts }) => assert_eq!(attempts, MAX_RETRIES + 1),
        other => panic!("{other:?}"),
    }
    // transient failures within the retry budget are absorbed
    let hook: FaultHook = Arc::new(|_, _, a| if a < MAX_RETRIES { Fault::Fail } else { Fault::None });
    let pool = WorkerPool::local_with_faults(2, Some(hook));
    assert!(assemble_forward(&x, &x, &KernelSpec::fc(1), &pool, 2).is_ok());
}

#[test]
fn pool_without_workers_gives_up() {
    let mut pool = WorkerPool::local(0);
    pool.stall_timeout = Duration::from_millis(100);
    let x = images(2, (1, 1, 2), 5);
    assert!(matches!(
        assemble_forward(&x, &x, &KernelSpec::fc(1), &pool, 1),
        Err(Error::WorkerFailure(_))
    ));
}

#[test]
fn backward_matches_monolithic_gradient() {
    let spec = KernelSpec::convnet(2);
    let xs = images(5, (4, 4, 1), 6);
    let xt = images(7, (4, 4, 1), 7);
    let d_kss = random_matrix(5, 5, 8);
    let d_kts = random_matrix(7, 5, 9);
    let (a, b) = kernel_block_vjp(&xs, &xs, &spec, &d_kss).unwrap();
    let (_, c) = kernel_block_vjp(&xt, &xs, &spec, &d_kts).unwrap();
    let pool = WorkerPool::local(3);
    let g = assemble_backward(&xs, &xt, &spec, &d_kss, &d_kts, &pool, 2).unwrap();
    for i in 0..g.len() {
        let want = a[i] + b[i] + c[i];
        assert!((g[i] - want).abs() < 1e-10 * want.abs().max(1.0), "{i}: {} vs {want}", g[i]);
    }
    for w in [1, 8] {
        let again = assemble_backward(&xs, &xt, &spec, &d_kss, &d_kts, &WorkerPool::local(w), 2).unwrap();
        assert_eq!(bits(&again), bits(&g));
    }
    let zero = assemble_backward(&xs, &xt, &spec, &DMatrix::zeros(5, 5), &DMatrix::zeros(7, 5), &pool, 2).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
}

/// Answers tasks in a shuffled order.
struct Shuffled(u64);

impl Executor for Shuffled {
    fn run(&self, tasks: Vec<BlockTask>) -> Result<Vec<BlockResult>> {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.0));
        let mut out: Vec<Option<BlockResult>> = vec![None; tasks.len()];
        for i in order {
            out[i] = Some(execute(&tasks[i], 0)?);
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }
}

#[test]
fn completion_order_does_not_change_bits() {
    let spec = KernelSpec::conv_vec(1);
    let xs = images(6, (3, 3, 2), 10);
    let xt = images(5, (3, 3, 2), 11);
    let d_kss = random_matrix(6, 6, 12);
    let d_kts = random_matrix(5, 6, 13);
    let base = assemble_backward(&xs, &xt, &spec, &d_kss, &d_kts, &Inline, 2).unwrap();
    for seed in 0..4 {
        let g = assemble_backward(&xs, &xt, &spec, &d_kss, &d_kts, &Shuffled(seed), 2).unwrap();
        assert_eq!(bits(&g), bits(&base));
    }
}

#[test]
fn distributed_loss_gradient_matches_local() {
    let spec = KernelSpec::convnet(1);
    let xs = images(4, (4, 4, 1), 14);
    let xt = images(6, (4, 4, 1), 15);
    let ys = LabelMatrix::centered_one_hot(&[0, 1, 0, 1], 2).unwrap();
    let yt = LabelMatrix::centered_one_hot(&[1, 0, 1, 0, 0, 1], 2).unwrap();
    let local = loss_gradient_with(&Local, &xs, &ys, &xt, &yt, &spec, 1e-3, LambdaMode::Adaptive).unwrap();
    let pool = WorkerPool::local(4);
    let backend = Distributed { pool: &pool, block: Some(3) };
    let dist = loss_gradient_with(&backend, &xs, &ys, &xt, &yt, &spec, 1e-3, LambdaMode::Adaptive).unwrap();
    assert!((local.loss - dist.loss).abs() < 1e-10 * local.loss.max(1.0));
    for (a, b) in local.images.iter().zip(&dist.images) {
        assert!((a - b).abs() < 1e-10 * b.abs().max(1.0));
    }
    assert!((local.labels - dist.labels).abs().max() < 1e-10);
}

#[test]
fn tcp_pool_matches_in_process_pool() {
    let spec = KernelSpec::convnet(1);
    let x = images(5, (4, 4, 1), 16);
    let y = images(3, (4, 4, 1), 17);
    let pool = WorkerPool::serve("127.0.0.1:0", Duration::from_millis(50)).unwrap();
    let addr = pool.local_addr().unwrap();
    let workers: Vec<_> = (0..2)
        .map(|_| thread::spawn(move || worker_connect(addr, Duration::from_secs(10))))
        .collect();
    pool.wait_for_workers(2, Duration::from_secs(10)).unwrap();
    let remote = assemble_forward(&x, &y, &spec, &pool, 2).unwrap();
    let local = assemble_forward(&x, &y, &spec, &WorkerPool::local(2), 2).unwrap();
    assert_eq!(bits(remote.as_slice()), bits(local.as_slice()));
    let ct = random_matrix(5, 3, 18);
    let r = assemble_vjp(&x, &y, &spec, &ct, Sides::Both, &pool, 2).unwrap();
    let l = assemble_vjp(&x, &y, &spec, &ct, Sides::Both, &Inline, 2).unwrap();
    assert_eq!((bits(&r.0), bits(&r.1)), (bits(&l.0), bits(&l.1)));
    drop(pool);
    for w in workers {
        assert_eq!(w.join().unwrap().unwrap(), WorkerExit::Shutdown);
    }
}

#[test]
fn idle_worker_disconnects() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let w = thread::spawn(move || worker_connect(addr, Duration::from_millis(100)));
    let (_conn, _) = listener.accept().unwrap();
    assert_eq!(w.join().unwrap().unwrap(), WorkerExit::IdleTimeout);
}

#[test]
fn worker_reports_compute_errors() {
    // a zero image has no FC kernel
    let mut x = images(1, (1, 1, 3), 19);
    x.pixels_mut().fill(0.0);
    let task = BlockTask {
        task_id: 7,
        phase: Phase::Forward,
        spec: KernelSpec::fc(1),
        x_block: x.clone(),
        y_block: x,
        cotangent: None,
        sides: Sides::Both,
        coords: (0, 0),
    };
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let w = thread::spawn(move || worker_connect(addr, Duration::from_secs(10)));
    let (mut conn, _) = listener.accept().unwrap();
    wire::write_message(&mut conn, &Message::Task(task)).unwrap();
    match wire::read_message(&mut conn).unwrap() {
        Message::Failure { task_id: 7, .. } => {}
        other => panic!("{other:?}"),
    }
    wire::write_message(&mut conn, &Message::Shutdown).unwrap();
    assert_eq!(w.join().unwrap().unwrap(), WorkerExit::Shutdown);
}

fn sample_task(seed: u64, backward: bool) -> BlockTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (rng.random_range(1..4), rng.random_range(1..4));
    let shape = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3));
    let spec = KernelSpec::convnet(rng.random_range(1..4))
        .nngp()
        .with_variances(rng.random_range(0.5..3.0), rng.random_range(0.0..0.5));
    BlockTask {
        task_id: rng.random(),
        phase: if backward { Phase::Backward } else { Phase::Forward },
        spec,
        x_block: images(n, shape, seed + 1),
        y_block: images(m, shape, seed + 2).with_tag(Preprocessing::Zca { lambda: 0.1 }),
        cotangent: backward.then(|| random_matrix(n, m, seed + 3)),
        sides: Sides::Y,
        coords: (rng.random_range(0..100), rng.random_range(0..100)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn task_round_trip(seed in any::<u64>(), backward in any::<bool>()) {
        let msg = Message::Task(sample_task(seed, backward));
        let frame = encode(&msg);
        let (back, used) = decode(&frame).unwrap();
        prop_assert_eq!(used, frame.len());
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn result_round_trip(seed in any::<u64>(), grads in any::<bool>()) {
        let payload = if grads {
            Payload::Gradients { x: random_matrix(1, 5, seed).as_slice().to_vec(), y: vec![] }
        } else {
            Payload::Kernel(random_matrix(2, 3, seed))
        };
        let msg = Message::Result(BlockResult { task_id: seed, payload, worker_id: 3, elapsed_ms: seed % 1000 });
        prop_assert_eq!(decode(&encode(&msg)).unwrap().0, msg);
    }

    #[test]
    fn truncated_frames_are_rejected(seed in any::<u64>(), cut in 0.0f64..1.0) {
        let frame = encode(&Message::Task(sample_task(seed, true)));
        let n = (cut * frame.len() as f64) as usize;
        prop_assert!(decode(&frame[..n]).is_err());
    }
}

#[test]
fn frame_layout_is_fixed() {
    let frame = encode(&Message::Shutdown);
    assert_eq!(frame, vec![10, 0, 0, 0, 3, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
    assert_eq!(encode(&Message::Heartbeat)[4], 4);
    let msg = Message::Failure { task_id: 9, reason: "boom".into() };
    assert_eq!(decode(&encode(&msg)).unwrap().0, msg);
}

#[test]
fn bad_frames_are_protocol_errors() {
    let mut frame = encode(&Message::Heartbeat);
    frame[5] = 2;
    assert!(matches!(decode(&frame), Err(Error::ProtocolError(_))));
    let mut frame = encode(&Message::Heartbeat);
    frame[4] = 9;
    assert!(matches!(decode(&frame), Err(Error::ProtocolError(_))));
    let mut frame = encode(&Message::Heartbeat);
    frame.push(0);
    frame[0] += 1;
    assert!(matches!(decode(&frame), Err(Error::ProtocolError(_))));
    // forward task with a cotangent
    let mut t = sample_task(1, true);
    t.phase = Phase::Forward;
    assert!(decode(&encode(&Message::Task(t))).is_err());
}
