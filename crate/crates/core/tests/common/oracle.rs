//! Single-address-space reference for the eight collectives.
//!
//! Values are kept as typed vectors and encoded with `to_le_bytes`, and
//! reductions are serial rank-ascending folds written out here, so nothing
//! in the library's own buffer arithmetic is reused.
#![allow(dead_code)]

use std::time::Duration;

use multiworld::{Buffer, CollectiveKind, Communicator, DType, ReduceOp, WorkHandle, WorkResult};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub enum Vals {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl Vals {
    pub fn random<R: Rng>(rng: &mut R, dtype: DType, len: usize) -> Vals {
        // Floats are small multiples of 1/8, so every value is exact and
        // never a negative zero.
        let mut fl = || {
            (rng.gen_range(-1000i32..=1000) as f64) / 8.0
                + if rng.gen_bool(0.5) { 0.0 } else { 0.125 }
        };
        match dtype {
            DType::F32 => Vals::F32((0..len).map(|_| fl() as f32).collect()),
            DType::F64 => Vals::F64((0..len).map(|_| fl()).collect()),
            DType::I32 => Vals::I32((0..len).map(|_| rng.gen()).collect()),
            DType::I64 => Vals::I64((0..len).map(|_| rng.gen()).collect()),
            DType::U8 => Vals::U8((0..len).map(|_| rng.gen()).collect()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            Vals::F32(_) => DType::F32,
            Vals::F64(_) => DType::F64,
            Vals::I32(_) => DType::I32,
            Vals::I64(_) => DType::I64,
            Vals::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Vals::F32(v) => v.len(),
            Vals::F64(v) => v.len(),
            Vals::I32(v) => v.len(),
            Vals::I64(v) => v.len(),
            Vals::U8(v) => v.len(),
        }
    }

    pub fn le_bytes(&self) -> Vec<u8> {
        match self {
            Vals::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Vals::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Vals::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Vals::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Vals::U8(v) => v.clone(),
        }
    }

    pub fn buffer(&self) -> Buffer {
        Buffer::from_bytes(self.dtype(), self.le_bytes()).unwrap()
    }
}

fn fold_f<T: Copy + PartialOrd + std::ops::Add<Output = T> + std::ops::Mul<Output = T>>(
    op: ReduceOp,
    cols: &[&Vec<T>],
) -> Vec<T> {
    let mut acc = cols[0].clone();
    for c in &cols[1..] {
        for (a, b) in acc.iter_mut().zip(c.iter()) {
            *a = match op {
                ReduceOp::Sum => *a + *b,
                ReduceOp::Prod => *a * *b,
                ReduceOp::Min => {
                    if *b < *a {
                        *b
                    } else {
                        *a
                    }
                }
                ReduceOp::Max => {
                    if *b > *a {
                        *b
                    } else {
                        *a
                    }
                }
            };
        }
    }
    acc
}

macro_rules! fold_i {
    ($op:expr, $cols:expr) => {{
        let cols = $cols;
        let mut acc = cols[0].clone();
        for c in &cols[1..] {
            for (a, b) in acc.iter_mut().zip(c.iter()) {
                *a = match $op {
                    ReduceOp::Sum => a.wrapping_add(*b),
                    ReduceOp::Prod => a.wrapping_mul(*b),
                    ReduceOp::Min => std::cmp::min(*a, *b),
                    ReduceOp::Max => std::cmp::max(*a, *b),
                };
            }
        }
        acc
    }};
}

/// Serial fold in rank order: ((x0 op x1) op x2) ...
pub fn reduce(op: ReduceOp, inputs: &[Vals]) -> Vals {
    macro_rules! cols {
        ($variant:ident) => {
            inputs
                .iter()
                .map(|v| match v {
                    Vals::$variant(x) => x,
                    _ => panic!("mixed dtypes"),
                })
                .collect::<Vec<_>>()
        };
    }
    match &inputs[0] {
        Vals::F32(_) => Vals::F32(fold_f(op, &cols!(F32))),
        Vals::F64(_) => Vals::F64(fold_f(op, &cols!(F64))),
        Vals::I32(_) => Vals::I32(fold_i!(op, cols!(I32))),
        Vals::I64(_) => Vals::I64(fold_i!(op, cols!(I64))),
        Vals::U8(_) => Vals::U8(fold_i!(op, cols!(U8))),
    }
}

/// One randomized collective invocation across a whole world.
#[derive(Debug, Clone)]
pub struct Case {
    pub kind: CollectiveKind,
    pub size: usize,
    pub dtype: DType,
    pub len: usize,
    pub root: usize,
    /// Destination for send/recv cases (`root` is the source).
    pub peer: usize,
    pub op: ReduceOp,
    /// Per-rank input; for scatter, the root's parts.
    pub inputs: Vec<Vals>,
}

impl Case {
    pub fn random<R: Rng>(rng: &mut R, kind: CollectiveKind, size: usize, max_len: usize) -> Case {
        let dtype = DType::ALL[rng.gen_range(0..DType::ALL.len())];
        let len = rng.gen_range(0..=max_len);
        let root = rng.gen_range(0..size);
        let mut peer = rng.gen_range(0..size - 1);
        if peer >= root {
            peer += 1;
        }
        let op = ReduceOp::ALL[rng.gen_range(0..ReduceOp::ALL.len())];
        let inputs = (0..size).map(|_| Vals::random(rng, dtype, len)).collect();
        Case {
            kind,
            size,
            dtype,
            len,
            root,
            peer,
            op,
            inputs,
        }
    }
}

/// What each rank must end up with.
#[derive(Debug, Clone, PartialEq)]
pub enum Expect {
    /// Rank does not take part (send/recv bystanders).
    Skip,
    Unit,
    One(Vec<u8>),
    Many(Vec<Vec<u8>>),
}

pub fn expected(c: &Case) -> Vec<Expect> {
    let all: Vec<Vec<u8>> = c.inputs.iter().map(|v| v.le_bytes()).collect();
    (0..c.size)
        .map(|r| match c.kind {
            CollectiveKind::Send | CollectiveKind::Recv => {
                if r == c.root {
                    Expect::Unit
                } else if r == c.peer {
                    Expect::One(all[c.root].clone())
                } else {
                    Expect::Skip
                }
            }
            CollectiveKind::Broadcast => Expect::One(all[c.root].clone()),
            CollectiveKind::AllReduce => Expect::One(reduce(c.op, &c.inputs).le_bytes()),
            CollectiveKind::Reduce => {
                if r == c.root {
                    Expect::One(reduce(c.op, &c.inputs).le_bytes())
                } else {
                    Expect::Unit
                }
            }
            CollectiveKind::AllGather => Expect::Many(all.clone()),
            CollectiveKind::Gather => {
                if r == c.root {
                    Expect::Many(all.clone())
                } else {
                    Expect::Unit
                }
            }
            CollectiveKind::Scatter => Expect::One(all[r].clone()),
        })
        .collect()
}

/// Submits `c` from every rank's communicator (`comms[r]` is rank r).
pub fn submit(c: &Case, world: &str, comms: &[Communicator]) -> Vec<Option<WorkHandle>> {
    (0..c.size)
        .map(|r| {
            let comm = &comms[r];
            let mine = c.inputs[r].buffer();
            let root = c.root as u32;
            let h = match c.kind {
                CollectiveKind::Send | CollectiveKind::Recv => {
                    if r == c.root {
                        comm.isend(world, c.peer as u32, c.inputs[c.root].buffer())
                    } else if r == c.peer {
                        comm.irecv(world, root, c.dtype, c.len)
                    } else {
                        return None;
                    }
                }
                CollectiveKind::Broadcast => {
                    let b = if r == c.root {
                        mine
                    } else {
                        Buffer::zeros(c.dtype, c.len)
                    };
                    comm.ibroadcast(world, root, b)
                }
                CollectiveKind::AllReduce => comm.iall_reduce(world, mine, c.op),
                CollectiveKind::Reduce => comm.ireduce(world, root, mine, c.op),
                CollectiveKind::AllGather => comm.iall_gather(world, mine),
                CollectiveKind::Gather => comm.igather(world, root, mine),
                CollectiveKind::Scatter => {
                    let parts = if r == c.root {
                        c.inputs.iter().map(|v| v.buffer()).collect()
                    } else {
                        Vec::new()
                    };
                    comm.iscatter(world, root, parts, c.dtype, c.len)
                }
            };
            Some(h.expect("submit"))
        })
        .collect()
}

fn bytes_of(b: &Buffer, dtype: DType, len: usize) -> Result<Vec<u8>, String> {
    if b.dtype() != dtype || b.len() != len {
        return Err(format!(
            "shape {}x{} != {}x{}",
            b.len(),
            b.dtype(),
            len,
            dtype
        ));
    }
    Ok(b.as_bytes().to_vec())
}

/// Runs one case and compares every rank's result to the oracle bytewise.
pub fn check(c: &Case, world: &str, comms: &[Communicator]) -> Result<(), String> {
    let exp = expected(c);
    let handles = submit(c, world, comms);
    for (r, (h, e)) in handles.into_iter().zip(exp).enumerate() {
        let Some(h) = h else {
            continue;
        };
        let got = h
            .wait(Some(Duration::from_secs(60)))
            .map_err(|e| format!("rank {r}: {e}"))?;
        let ok = match (&e, got) {
            (Expect::Unit, WorkResult::Unit) => true,
            (Expect::One(want), WorkResult::Buffer(b)) => bytes_of(&b, c.dtype, c.len)? == *want,
            (Expect::Many(want), WorkResult::Buffers(bs)) => {
                bs.len() == want.len()
                    && bs.iter().zip(want).all(|(b, w)| {
                        bytes_of(b, c.dtype, c.len)
                            .map(|x| x == *w)
                            .unwrap_or(false)
                    })
            }
            _ => false,
        };
        if !ok {
            return Err(format!(
                "rank {r}: {:?} size {} {}x{} root {} op {:?} differs from oracle",
                c.kind, c.size, c.len, c.dtype, c.root, c.op
            ));
        }
    }
    Ok(())
}
