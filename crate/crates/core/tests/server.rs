use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use ebp_core::wire::{decode_response, encode_request, encode_response, Request, Response, Verb};
use ebp_core::{
    Capability, ClientError, DepotConfig, DepotServer, ErrorCode, Hardness, Session,
};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const T: u64 = 5_000;

fn start() -> DepotServer {
    DepotServer::start(DepotConfig {
        listen_addr: "127.0.0.1:0".into(),
        ..DepotConfig::default()
    })
    .unwrap()
}

fn bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut v = vec![0; n];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

#[test]
fn stats_start_at_zero() {
    let server = start();
    let mut s = Session::connect(&server.addr_string(), T).unwrap();
    let stats = s.stats().unwrap();
    assert_eq!(stats, Default::default());
}

#[test]
fn concurrent_sessions() {
    let server = start();
    let addr = server.addr_string();
    let workers: Vec<_> = (0..32)
        .map(|w| {
            let addr = addr.clone();
            thread::spawn(move || {
                let mut s = Session::connect(&addr, T).unwrap();
                for i in 0..100u64 {
                    let payload = format!("{w}:{i}").into_bytes();
                    let caps = s
                        .allocate(payload.len() as u64, 600, Hardness::BestEffort)
                        .unwrap();
                    s.store(&caps.write, 0, &payload).unwrap();
                    let got = s.load(&caps.read, 0, payload.len() as u64).unwrap();
                    assert_eq!(got.data, payload);
                }
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    assert_eq!(server.depot().stats().live_allocations, 3200);
}

#[test]
fn sdk_matches_raw_bytes() {
    let server = start();
    let mut s = Session::connect(&server.addr_string(), T).unwrap();
    let caps = s.allocate(64, 100, Hardness::Hard).unwrap();

    let mut raw = TcpStream::connect(server.local_addr()).unwrap();
    let req = Request::Renew {
        cap: caps.manage.clone(),
        extension: 300,
    };
    raw.write_all(&encode_request(&req)).unwrap();
    let mut buf = vec![0u8; 128];
    let n = raw.read(&mut buf).unwrap();
    let raw_resp = decode_response(Verb::Renew, &buf[..n]).unwrap();
    let Response::Renewed { expires_in_ms: raw_ms } = raw_resp else {
        panic!("{raw_resp:?}")
    };
    let sdk_ms = s.renew(&caps.manage, 300).unwrap();
    // same target expiry; the two calls are milliseconds apart
    assert!(raw_ms.abs_diff(sdk_ms) <= 50, "{raw_ms} vs {sdk_ms}");
    assert!(raw_ms > 299_000);

    // golden bytes for an error
    let mut flipped = caps.read.clone();
    flipped.key = flipped.key.with_bit_flipped(0);
    let req = Request::Load {
        cap: flipped.clone(),
        offset: 0,
        length: 1,
    };
    raw.write_all(&encode_request(&req)).unwrap();
    let n = raw.read(&mut buf).unwrap();
    assert_eq!(
        &buf[..n],
        encode_response(&Response::error(ErrorCode::BadCapability, "capability rejected"))
    );
    assert_eq!(
        s.load(&flipped, 0, 1).unwrap_err().code(),
        Some(ErrorCode::BadCapability)
    );
}

#[test]
fn piecewise_ten_mib() {
    let server = DepotServer::start(DepotConfig {
        listen_addr: "127.0.0.1:0".into(),
        max_alloc_size: 32 << 20,
        ..DepotConfig::default()
    })
    .unwrap();
    let mut s = Session::connect(&server.addr_string(), T).unwrap();
    let data = bytes(10 << 20, 1);
    let caps = s.allocate(data.len() as u64, 60, Hardness::Hard).unwrap();
    let before = s.traffic().requests();
    s.store(&caps.write, 0, &data).unwrap();
    assert_eq!(s.traffic().requests() - before, 10);
    let got = s.load(&caps.read, 0, data.len() as u64).unwrap();
    assert!(got.data == data);
}

#[test]
fn local_transfer() {
    let server = start();
    let mut s = Session::connect(&server.addr_string(), T).unwrap();
    let data = bytes(100_000, 2);
    let a = s.allocate(data.len() as u64, 60, Hardness::Hard).unwrap();
    let b = s.allocate(data.len() as u64, 60, Hardness::Hard).unwrap();
    s.store(&a.write, 0, &data).unwrap();
    let moved = s.transfer(&a.read, 0, &b.write, 0, data.len() as u64).unwrap();
    assert_eq!(moved, data.len() as u64);
    assert!(s.load(&b.read, 0, data.len() as u64).unwrap().data == data);
}

#[test]
fn cross_depot_transfer_is_pushed_by_source() {
    let (src, dst) = (start(), start());
    let mut a = Session::connect(&src.addr_string(), T).unwrap();
    let mut b = Session::connect(&dst.addr_string(), T).unwrap();
    let data = bytes(5 << 20, 3);
    let from = a.allocate(data.len() as u64, 60, Hardness::Hard).unwrap();
    let to = b.allocate(data.len() as u64, 60, Hardness::Hard).unwrap();
    a.store(&from.write, 0, &data).unwrap();
    let sent_before = a.traffic().payload_total();
    a.transfer(&from.read, 0, &to.write, 0, data.len() as u64)
        .unwrap();
    assert_eq!(a.traffic().payload_total(), sent_before);
    assert_eq!(dst.traffic().load_bytes_served(), 0);
    assert_eq!(src.traffic().transfer_bytes_pushed(), data.len() as u64);
    assert!(dst.depot().load(&to.read, 0, data.len() as u64).unwrap().data == data);

    // pull is not supported: the source must be local
    let err = b
        .transfer(&from.read, 0, &to.write, 0, 1)
        .unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::NotLocal));
}

#[test]
fn transfer_to_dead_depot() {
    let src = start();
    let dst = start();
    let mut a = Session::connect(&src.addr_string(), T).unwrap();
    let from = a.allocate(10, 60, Hardness::Hard).unwrap();
    a.store(&from.write, 0, b"0123456789").unwrap();
    let to = dst.depot().allocate(10, 60, Hardness::Hard).unwrap();
    dst.kill();
    let err = a.transfer(&from.read, 0, &to.write, 0, 10).unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::RemoteUnreachable));
}

/// Forwards one connection to `target`, cutting it after `limit` bytes in
/// the client-to-server direction.
fn cutting_proxy(target: String, limit: usize) -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    thread::spawn(move || {
        let (mut inbound, _) = l.accept().unwrap();
        let mut outbound = TcpStream::connect(target).unwrap();
        let mut left = limit;
        let mut buf = [0u8; 8192];
        while left > 0 {
            let n = inbound.read(&mut buf[..left.min(8192)]).unwrap_or(0);
            if n == 0 {
                break;
            }
            outbound.write_all(&buf[..n]).unwrap();
            left -= n;
        }
        let _ = outbound.shutdown(Shutdown::Both);
        let _ = inbound.shutdown(Shutdown::Both);
    });
    addr
}

#[test]
fn interrupted_push_poisons_destination() {
    let src = start();
    let dst = start();
    let mut a = Session::connect(&src.addr_string(), T).unwrap();
    let data = bytes(1 << 20, 4);
    let from = a.allocate(data.len() as u64, 60, Hardness::Hard).unwrap();
    a.store(&from.write, 0, &data).unwrap();
    let to = dst
        .depot()
        .allocate(data.len() as u64, 60, Hardness::Hard)
        .unwrap();
    dst.depot().store(&to.write, 0, &vec![7; data.len()]).unwrap();

    let proxy = cutting_proxy(dst.addr_string(), 300_000);
    let via_proxy = Capability {
        depot_addr: proxy,
        ..to.write.clone()
    };
    let err = a
        .transfer(&from.read, 0, &via_proxy, 0, data.len() as u64)
        .unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::RemoteUnreachable), "{err:?}");
    // the destination saw a partial STORE
    let mut poisoned = false;
    for _ in 0..100 {
        if dst.depot().probe(&to.manage).unwrap().unknown_state {
            poisoned = true;
            break;
        }
        thread::sleep(Duration::from_millis(10));
    }
    assert!(poisoned);
}

#[test]
fn graceful_shutdown_finishes_in_flight() {
    let server = start();
    let mut s = Session::connect(&server.addr_string(), T).unwrap();
    let caps = s.allocate(4, 60, Hardness::Hard).unwrap();
    s.store(&caps.write, 0, b"abcd").unwrap();
    server.shutdown();
    // the session is closed at the request boundary: either a clean error or
    // nothing, never a partial frame
    match s.stats() {
        Err(ClientError::ConnectionLost(_)) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn fuzzed_requests_never_crash_the_server() {
    let server = start();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seeds: Vec<Vec<u8>> = vec![
        b"STATS\n".to_vec(),
        b"ALLOCATE 10 60 soft\n".to_vec(),
        format!(
            "LOAD {} 0 1\n",
            "ebp://127.0.0.1:1/1/0000000000000000000000000000000000000000/read"
        )
        .into_bytes(),
    ];
    for i in 0..300 {
        let mut input = seeds[i % seeds.len()].clone();
        for _ in 0..=(rng.next_u32() % 4) {
            let pos = rng.next_u32() as usize % input.len();
            input[pos] = rng.next_u32() as u8;
        }
        let mut conn = TcpStream::connect(server.local_addr()).unwrap();
        conn.set_read_timeout(Some(Duration::from_millis(200))).unwrap();
        conn.write_all(&input).unwrap();
        let _ = conn.shutdown(Shutdown::Write);
        let mut out = Vec::new();
        let _ = conn.read_to_end(&mut out);
        if let Some(rest) = out.strip_prefix(b"ERR ") {
            let code = String::from_utf8_lossy(rest);
            let code = code.split(' ').next().unwrap();
            assert!(code.parse::<ErrorCode>().is_ok(), "{code}");
        }
    }
    let mut s = Session::connect(&server.addr_string(), T).unwrap();
    assert!(s.stats().is_ok());
}
