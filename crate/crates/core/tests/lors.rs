use ebp_core::simnet::{Cluster, ClusterOptions};
use ebp_core::{DepotConfig, ErrorCode, Lors, LorsError, UploadOptions};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn data(n: usize, seed: u64) -> Vec<u8> {
    let mut v = vec![0; n];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

fn cluster(n: usize) -> Cluster {
    Cluster::spawn(n, ClusterOptions::default()).unwrap()
}

fn opts(chunk: u64, k: usize) -> UploadOptions {
    UploadOptions {
        chunk_size: chunk,
        replicas: k,
        ..UploadOptions::default()
    }
}

#[test]
fn empty_file() {
    let c = cluster(2);
    let x = Lors::default().upload(&[], &c.addrs(), &opts(10, 2)).unwrap();
    assert_eq!(x.total_length, 0);
    assert!(x.extents.is_empty());
    assert!(Lors::default().download(&x, 4).unwrap().is_empty());
}

#[test]
fn round_robin_placement() {
    let c = cluster(3);
    let d = c.addrs();
    let lors = Lors::default();
    let x = lors
        .upload(&data(10 << 20, 1), &d, &opts(4 << 20, 2))
        .unwrap();
    let placement: Vec<Vec<&str>> = x
        .extents
        .iter()
        .map(|e| e.replicas.iter().map(|r| r.depot.as_str()).collect())
        .collect();
    assert_eq!(
        placement,
        vec![
            vec![d[0].as_str(), d[1].as_str()],
            vec![d[1].as_str(), d[2].as_str()],
            vec![d[2].as_str(), d[0].as_str()],
        ]
    );
    let lengths: Vec<u64> = x.extents.iter().map(|e| e.length).collect();
    assert_eq!(lengths, vec![4 << 20, 4 << 20, 2 << 20]);
}

#[test]
fn boundary_sizes_round_trip() {
    let c = cluster(3);
    let lors = Lors::default();
    let chunk = 1000u64;
    for (i, n) in [0, 1, chunk - 1, chunk, chunk + 1, 7 * chunk + 13].into_iter().enumerate() {
        let bytes = data(n as usize, i as u64);
        let x = lors.upload(&bytes, &c.addrs(), &opts(chunk, 2)).unwrap();
        assert!(x.is_valid());
        assert_eq!(lors.download(&x, 3).unwrap(), bytes, "n={n}");
    }
}

#[test]
fn dead_depot_is_skipped_on_upload() {
    let mut c = cluster(3);
    c.kill(1).unwrap();
    let lors = Lors::default();
    let bytes = data(5000, 9);
    let x = lors.upload(&bytes, &c.addrs(), &opts(1000, 2)).unwrap();
    let dead = c.addr(1).unwrap();
    assert!(x
        .extents
        .iter()
        .all(|e| e.replicas.len() == 2 && e.replicas.iter().all(|r| r.depot != dead)));
    assert_eq!(lors.download(&x, 2).unwrap(), bytes);

    c.kill(2).unwrap();
    let err = lors.upload(&bytes, &c.addrs(), &opts(1000, 2)).unwrap_err();
    assert!(matches!(err, LorsError::InsufficientDepots { .. }), "{err}");
}

#[test]
fn oversize_chunk_surfaces_depot_error() {
    let mut options = ClusterOptions::default();
    options.base = DepotConfig {
        max_alloc_size: 100,
        ..DepotConfig::default()
    };
    let c = Cluster::spawn(2, options).unwrap();
    let err = Lors::default()
        .upload(&data(500, 1), &c.addrs(), &opts(200, 1))
        .unwrap_err();
    match err {
        LorsError::Chunk { error, .. } => {
            assert_eq!(error.code(), Some(ErrorCode::SizeLimitExceeded))
        }
        other => panic!("{other}"),
    }
}

#[test]
fn failover_and_unavailable_range() {
    let mut c = cluster(4);
    let lors = Lors::default();
    let bytes = data(8000, 3);
    let x = lors.upload(&bytes, &c.addrs(), &opts(1000, 2)).unwrap();
    c.kill(0).unwrap();
    assert_eq!(lors.download(&x, 4).unwrap(), bytes);
    c.kill(1).unwrap();
    // extent 0 lived on depots 0 and 1
    match lors.download(&x, 4).unwrap_err() {
        LorsError::ExtentUnavailable { start, end, .. } => assert_eq!((start, end), (0, 1000)),
        other => panic!("{other}"),
    }
}

#[test]
fn repair_moves_no_bytes_through_client() {
    let mut c = cluster(4);
    let lors = Lors::default();
    let bytes = data(6000, 5);
    let x = lors.upload(&bytes, &c.addrs(), &opts(1000, 2)).unwrap();

    let (same, report) = lors.repair(&x, 2, &c.addrs(), 3600).unwrap();
    assert_eq!(same, x);
    assert_eq!(report.transfers, 0);

    c.kill(2).unwrap();
    let dead = c.addr(2).unwrap();
    let lost = x
        .extents
        .iter()
        .filter(|e| e.replicas.iter().any(|r| r.depot == dead))
        .count();
    let fresh = Lors::default();
    let (fixed, report) = fresh.repair(&x, 2, &c.addrs(), 3600).unwrap();
    assert_eq!(report.transfers, lost);
    assert_eq!(report.dropped, lost);
    assert_eq!(fresh.traffic().payload_total(), 0);
    assert!(fixed
        .extents
        .iter()
        .all(|e| e.replicas.len() == 2 && e.replicas.iter().all(|r| r.depot != dead)));
    c.kill(0).unwrap();
    assert_eq!(lors.download(&fixed, 4).unwrap(), bytes);
}
