//! Byte-exact wire fixtures, both directions.
#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use multiworld::store::protocol::{Request, Response, Status};
use multiworld::transport::{Frame, FrameDecoder};
use multiworld::{Buffer, StoreServer};

macro_rules! fixture {
    ($name:literal) => {
        ($name, &include_bytes!(concat!("../fixtures/", $name))[..])
    };
}

fn requests() -> Vec<(&'static str, &'static [u8], Request)> {
    let k = |s: &str| s.as_bytes().to_vec();
    vec![
        {
            let (n, b) = fixture!("store_set.bin");
            (
                n,
                b,
                Request::Set {
                    key: k("world/w1/0/rank/0/addr"),
                    value: k("10.0.0.1:4000"),
                },
            )
        },
        {
            let (n, b) = fixture!("store_get.bin");
            (
                n,
                b,
                Request::Get {
                    key: k("world/w1/0/size"),
                },
            )
        },
        {
            let (n, b) = fixture!("store_add.bin");
            (
                n,
                b,
                Request::Add {
                    key: k("world/w1/0/joined"),
                    delta: -3,
                },
            )
        },
        {
            let (n, b) = fixture!("store_wait.bin");
            (
                n,
                b,
                Request::Wait {
                    key: k("world/w1/0/rank/1/addr"),
                    timeout_ms: 1500,
                },
            )
        },
        {
            let (n, b) = fixture!("store_delete.bin");
            (n, b, Request::Delete { key: k("k") })
        },
        {
            let (n, b) = fixture!("store_delete_prefix.bin");
            (
                n,
                b,
                Request::DeletePrefix {
                    prefix: k("world/w2/"),
                },
            )
        },
    ]
}

fn responses() -> Vec<(&'static str, &'static [u8], Response)> {
    let r = |status, value: &[u8]| Response {
        status,
        value: value.to_vec(),
    };
    vec![
        {
            let (n, b) = fixture!("store_resp_ok.bin");
            (n, b, r(Status::Ok, b"10.0.0.1:4000"))
        },
        {
            let (n, b) = fixture!("store_resp_ok_empty.bin");
            (n, b, r(Status::Ok, b""))
        },
        {
            let (n, b) = fixture!("store_resp_counter.bin");
            (n, b, r(Status::Ok, &7i64.to_le_bytes()))
        },
        {
            let (n, b) = fixture!("store_resp_not_found.bin");
            (n, b, r(Status::NotFound, b""))
        },
        {
            let (n, b) = fixture!("store_resp_timeout.bin");
            (n, b, r(Status::Timeout, b""))
        },
    ]
}

fn frames() -> Vec<(&'static str, &'static [u8], Frame)> {
    let mut f32f = Frame::data("w1", &Buffer::from_slice(&[1.0f32, 2.0]));
    f32f.op_seq = 0;
    let mut i64f = Frame::data("pipeline", &Buffer::from_slice(&[-1i64, 0, 1 << 40]));
    i64f.op_seq = 5;
    vec![
        {
            let (n, b) = fixture!("frame_data_f32.bin");
            (n, b, f32f)
        },
        {
            let (n, b) = fixture!("frame_data_i64_seq5.bin");
            (n, b, i64f)
        },
        {
            let (n, b) = fixture!("frame_hello.bin");
            (n, b, Frame::hello("w1", 3))
        },
        {
            let (n, b) = fixture!("frame_bye.bin");
            (n, b, Frame::bye("w1"))
        },
    ]
}

fn same(name: &str, got: &[u8], want: &[u8]) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{name}: encoded {got:02x?}, fixture {want:02x?}"))
    }
}

/// Every fixture: encoding matches byte for byte and decoding gives the
/// value back.
pub fn check_all() -> Vec<(String, Result<(), String>)> {
    let mut out = Vec::new();
    for (n, bytes, req) in requests() {
        let r = same(n, &req.encode(), bytes).and_then(|_| {
            let back = Request::read_from(&mut &bytes[..]).map_err(|e| e.to_string())?;
            (back.as_ref() == Some(&req))
                .then_some(())
                .ok_or(format!("{n}: decoded {back:?}"))
        });
        out.push((n.to_string(), r));
    }
    for (n, bytes, resp) in responses() {
        let r = same(n, &resp.encode(), bytes).and_then(|_| {
            let back = Response::read_from(&mut &bytes[..]).map_err(|e| e.to_string())?;
            (back == resp)
                .then_some(())
                .ok_or(format!("{n}: decoded {back:?}"))
        });
        out.push((n.to_string(), r));
    }
    for (n, bytes, frame) in frames() {
        let r = same(n, &frame.encode(), bytes).and_then(|_| {
            let back = FrameDecoder::new()
                .poll_frame(&mut &bytes[..])
                .map_err(|e| e.to_string())?;
            (back.as_ref() == Some(&frame))
                .then_some(())
                .ok_or(format!("{n}: decoded {back:?}"))
        });
        out.push((n.to_string(), r));
    }
    let (_, f32f) = fixture!("frame_data_f32.bin");
    let tail = &f32f[f32f.len() - 8..];
    out.push((
        "f32 [1.0, 2.0] payload".to_string(),
        same(
            "payload",
            tail,
            &[0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x00, 0x40],
        ),
    ));
    out.push(("live server replies".to_string(), live_server()));
    out
}

/// Feeds fixture requests to a real server and compares the raw replies.
fn live_server() -> Result<(), String> {
    let s = StoreServer::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let mut c = TcpStream::connect(s.local_addr()).map_err(|e| e.to_string())?;
    c.set_read_timeout(Some(Duration::from_secs(5))).ok();
    let mut exchange = |req: &[u8], n: usize| -> Result<Vec<u8>, String> {
        c.write_all(req).map_err(|e| e.to_string())?;
        let mut buf = vec![0u8; n];
        c.read_exact(&mut buf).map_err(|e| e.to_string())?;
        Ok(buf)
    };
    let (_, set) = fixture!("store_set.bin");
    let (_, ok_empty) = fixture!("store_resp_ok_empty.bin");
    same("SET reply", &exchange(set, ok_empty.len())?, ok_empty)?;
    let (_, get) = fixture!("store_get.bin");
    let (_, nf) = fixture!("store_resp_not_found.bin");
    same("GET reply", &exchange(get, nf.len())?, nf)?;
    let mut get_addr = vec![2u8];
    get_addr.extend_from_slice(&22u32.to_le_bytes());
    get_addr.extend_from_slice(b"world/w1/0/rank/0/addr");
    let (_, ok) = fixture!("store_resp_ok.bin");
    same("GET addr reply", &exchange(&get_addr, ok.len())?, ok)?;
    let (_, del) = fixture!("store_delete.bin");
    same("DELETE reply", &exchange(del, ok_empty.len())?, ok_empty)?;
    Ok(())
}
