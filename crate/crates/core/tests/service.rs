mod common;

use std::collections::BTreeSet;
use std::io::{BufReader, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use common::{p, sdf_file, text, Fixture};
use scispace::cluster::ClusterOptions;
use scispace::protocol::{decode_error, decode_frame, encode_frame, FieldReader, MessageType, Request};
use scispace::sds::{IndexMode, SpecSet};
use scispace::shard::StoreOptions;
use scispace::Error;

fn connect(f: &Fixture) -> (BufReader<TcpStream>, TcpStream) {
    let s = TcpStream::connect(f.cluster.dtns()[0].endpoint).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    (BufReader::new(s.try_clone().unwrap()), s)
}

fn get(path: &str) -> Request {
    Request::GetFile {
        requester: "alice".into(),
        path: p(path),
    }
}

fn send(w: &mut TcpStream, req: &Request, id: u32) {
    let frame = encode_frame(req.msg_type() as u16, id, &req.encode().encode()).unwrap();
    w.write_all(&frame).unwrap();
}

#[test]
fn pipelined_requests_are_answered_by_id() {
    let f = Fixture::new(1, "");
    let s = f.session("alice", IndexMode::LwOffline);
    for i in 0..20 {
        s.ws_write(&p(&format!("/public/f{i}")), b"x").unwrap();
    }
    let (mut r, mut w) = connect(&f);
    for i in 0..40u32 {
        send(&mut w, &get(&format!("/public/f{i}")), 100 + i);
    }
    let mut seen = BTreeSet::new();
    for _ in 0..40 {
        let fr = decode_frame(&mut r).unwrap();
        let i = fr.request_id - 100;
        assert!(seen.insert(i));
        let ty = MessageType::from_u16(fr.msg_type).unwrap();
        if i < 20 {
            assert_eq!(ty, MessageType::Result, "f{i}");
        } else {
            assert_eq!(ty, MessageType::Error);
            assert!(matches!(decode_error(&fr.payload), Error::NotFound(_)));
        }
    }
    assert_eq!(seen.len(), 40);
}

#[test]
fn unknown_type_gets_an_error_and_the_connection_survives() {
    let f = Fixture::new(1, "");
    let (mut r, mut w) = connect(&f);
    w.write_all(&encode_frame(77, 5, &[0, 0]).unwrap()).unwrap();
    let fr = decode_frame(&mut r).unwrap();
    assert_eq!(fr.request_id, 5);
    assert_eq!(fr.msg_type, MessageType::Error as u16);
    assert!(matches!(decode_error(&fr.payload), Error::Remote { code: 5, .. }));

    // Malformed payload of a known type is a request error, not a hangup.
    w.write_all(&encode_frame(2, 6, &[0xff]).unwrap()).unwrap();
    let fr = decode_frame(&mut r).unwrap();
    assert_eq!((fr.request_id, fr.msg_type), (6, MessageType::Error as u16));

    send(&mut w, &get("/public/none"), 7);
    let fr = decode_frame(&mut r).unwrap();
    assert_eq!(fr.request_id, 7);
    assert!(matches!(decode_error(&fr.payload), Error::NotFound(_)));
}

#[test]
fn oversized_frame_is_refused_and_closed() {
    let f = Fixture::new(1, "");
    let (mut r, mut w) = connect(&f);
    let mut hdr = Vec::new();
    hdr.extend_from_slice(&(65u32 * 1024 * 1024).to_be_bytes());
    hdr.extend_from_slice(&2u16.to_be_bytes());
    hdr.extend_from_slice(&9u32.to_be_bytes());
    w.write_all(&hdr).unwrap();
    let fr = decode_frame(&mut r).unwrap();
    assert_eq!((fr.request_id, fr.msg_type), (0, MessageType::Error as u16));
    let mut rest = Vec::new();
    assert_eq!(r.read_to_end(&mut rest).unwrap(), 0);
}

#[test]
fn result_payload_for_count_queries() {
    let f = Fixture::new(1, "");
    let (mut r, mut w) = connect(&f);
    send(
        &mut w,
        &Request::EnqueueIndex {
            requester: "alice".into(),
            paths: vec![],
            offline_selector: None,
            flush: true,
        },
        1,
    );
    let fr = decode_frame(&mut r).unwrap();
    assert_eq!(fr.msg_type, MessageType::Result as u16);
    assert_eq!(FieldReader::parse(&fr.payload).unwrap().u64(1).unwrap(), 0);
}

#[test]
fn restart_replays_to_identical_state() {
    for snapshot_every in [1, 3, 4096] {
        let mut f = Fixture::with(ClusterOptions {
            dtns: 2,
            specs: SpecSet::parse("site:text\n").unwrap(),
            store: StoreOptions {
                snapshot_every,
                ..Default::default()
            },
            ..Default::default()
        });
        let s = f.session("alice", IndexMode::InlineSync);
        for i in 0..25 {
            s.ws_write(
                &p(&format!("/public/r/f{i}.sdf")),
                &sdf_file(&[("site", text("x"))], b""),
            )
            .unwrap();
        }
        s.tag(&p("/public/r/f3.sdf"), "note", text("kept")).unwrap();
        scispace::meu::local_write(s.backend(0), "public/lw", b"l").unwrap();
        scispace::meu::meu_export(&s, 0, &Default::default()).unwrap();
        let before: Vec<_> = (0..2).map(|i| f.cluster.server(i).dump()).collect();
        for i in 0..2 {
            f.cluster.restart(i).unwrap();
        }
        let after: Vec<_> = (0..2).map(|i| f.cluster.server(i).dump()).collect();
        assert_eq!(before, after, "snapshot_every={snapshot_every}");
        assert_eq!(s.ws_read(&p("/public/r/f7.sdf")).unwrap().len(), 26);
    }
}

#[test]
fn concurrent_sessions_do_not_interfere() {
    let f = Fixture::new(2, "");
    std::thread::scope(|sc| {
        for w in 0..4 {
            let f = &f;
            sc.spawn(move || {
                let s = f.session(&format!("user{w}"), IndexMode::LwOffline);
                for i in 0..25 {
                    s.ws_write(&p(&format!("/public/w{w}/f{i}")), b"c").unwrap();
                }
            });
        }
    });
    let s = f.session("reader", IndexMode::LwOffline);
    for w in 0..4 {
        assert_eq!(s.ws_readdir(&p(&format!("/public/w{w}"))).unwrap().len(), 25);
    }
}
