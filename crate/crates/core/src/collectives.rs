//! The eight collective operations, expressed as step-driven kernels.
//!
//! Every kernel uses flat algorithms: broadcast fans out from the root,
//! reduce fans in to the root and folds in rank-ascending order, all-reduce
//! is reduce-to-rank-0 followed by broadcast, and the gather family uses
//! direct exchanges. Each rank sends and receives at most one frame per peer
//! per operation.
//!
//! A kernel never touches sockets. When started it declares which peers it
//! expects a frame from and which peers it will send to (possibly with the
//! payload still unknown). The poller feeds it received buffers and writes
//! the payloads it produces.

use crate::error::{MwError, Result};
use crate::types::{fold_buffers, Buffer, DType, Rank, ReduceOp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CollectiveKind {
    Send,
    Recv,
    Broadcast,
    AllReduce,
    Reduce,
    AllGather,
    Gather,
    Scatter,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 8] = [
        CollectiveKind::Send,
        CollectiveKind::Recv,
        CollectiveKind::Broadcast,
        CollectiveKind::AllReduce,
        CollectiveKind::Reduce,
        CollectiveKind::AllGather,
        CollectiveKind::Gather,
        CollectiveKind::Scatter,
    ];

    pub fn class(self) -> OpClass {
        match self {
            CollectiveKind::Send | CollectiveKind::Recv => OpClass::PointToPoint,
            _ => OpClass::Collective,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::Send => "send",
            CollectiveKind::Recv => "recv",
            CollectiveKind::Broadcast => "broadcast",
            CollectiveKind::AllReduce => "all_reduce",
            CollectiveKind::Reduce => "reduce",
            CollectiveKind::AllGather => "all_gather",
            CollectiveKind::Gather => "gather",
            CollectiveKind::Scatter => "scatter",
        }
    }
}

/// Operation classes that get independent call sequence numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpClass {
    PointToPoint,
    Collective,
}

/// One request against a world, as submitted to the communicator.
///
/// Where a rank only receives (broadcast/scatter at non-roots, recv), the
/// dtype and length of the expected payload must be given so a mismatched
/// peer is caught as `Protocol`.
#[derive(Debug, Clone)]
pub enum CollectiveCall {
    Send {
        world: String,
        dst: Rank,
        buf: Buffer,
    },
    Recv {
        world: String,
        src: Rank,
        dtype: DType,
        len: usize,
    },
    /// At the root `buf` is the payload; elsewhere it is a shape template.
    Broadcast {
        world: String,
        root: Rank,
        buf: Buffer,
    },
    AllReduce {
        world: String,
        buf: Buffer,
        op: ReduceOp,
    },
    Reduce {
        world: String,
        root: Rank,
        buf: Buffer,
        op: ReduceOp,
    },
    AllGather {
        world: String,
        buf: Buffer,
    },
    Gather {
        world: String,
        root: Rank,
        buf: Buffer,
    },
    /// `parts` is used at the root only (one buffer per rank); every rank
    /// states the per-rank shape.
    Scatter {
        world: String,
        root: Rank,
        parts: Vec<Buffer>,
        dtype: DType,
        len: usize,
    },
}

impl CollectiveCall {
    pub fn world(&self) -> &str {
        match self {
            CollectiveCall::Send { world, .. }
            | CollectiveCall::Recv { world, .. }
            | CollectiveCall::Broadcast { world, .. }
            | CollectiveCall::AllReduce { world, .. }
            | CollectiveCall::Reduce { world, .. }
            | CollectiveCall::AllGather { world, .. }
            | CollectiveCall::Gather { world, .. }
            | CollectiveCall::Scatter { world, .. } => world,
        }
    }

    pub fn kind(&self) -> CollectiveKind {
        match self {
            CollectiveCall::Send { .. } => CollectiveKind::Send,
            CollectiveCall::Recv { .. } => CollectiveKind::Recv,
            CollectiveCall::Broadcast { .. } => CollectiveKind::Broadcast,
            CollectiveCall::AllReduce { .. } => CollectiveKind::AllReduce,
            CollectiveCall::Reduce { .. } => CollectiveKind::Reduce,
            CollectiveCall::AllGather { .. } => CollectiveKind::AllGather,
            CollectiveCall::Gather { .. } => CollectiveKind::Gather,
            CollectiveCall::Scatter { .. } => CollectiveKind::Scatter,
        }
    }
}

/// What a finished operation hands back at this rank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkResult {
    /// The operation produces no output here (send, non-root reduce/gather).
    Unit,
    Buffer(Buffer),
    /// One buffer per rank, in rank order.
    Buffers(Vec<Buffer>),
}

impl WorkResult {
    pub fn buffer(self) -> Option<Buffer> {
        match self {
            WorkResult::Buffer(b) => Some(b),
            _ => None,
        }
    }

    pub fn buffers(self) -> Option<Vec<Buffer>> {
        match self {
            WorkResult::Buffers(b) => Some(b),
            _ => None,
        }
    }
}

/// Peers a kernel talks to, decided when it starts.
#[derive(Debug, Default)]
pub(crate) struct Plan {
    pub recv_from: Vec<Rank>,
    /// `None` payloads are filled later by [`Kernel::on_recv`].
    pub sends: Vec<(Rank, Option<Buffer>)>,
}

#[derive(Debug, Clone, Copy)]
enum AfterCollect {
    Gather,
    Reduce(ReduceOp),
    /// Reduce, then send the result to every other rank.
    AllReduce(ReduceOp),
}

#[derive(Debug)]
enum State {
    SendOnly,
    Single {
        dtype: DType,
        len: usize,
        got: Option<Buffer>,
    },
    Fixed(Buffer),
    Collect {
        dtype: DType,
        len: usize,
        slots: Vec<Option<Buffer>>,
        remaining: usize,
        then: AfterCollect,
        result: Option<Buffer>,
    },
}

#[derive(Debug)]
pub(crate) struct Kernel {
    my_rank: Rank,
    size: u32,
    state: State,
}

fn check_rank(r: Rank, size: u32, what: &str) -> Result<()> {
    if r >= size {
        return Err(MwError::protocol(format!(
            "{what} {r} out of range for world size {size}"
        )));
    }
    Ok(())
}

fn others(me: Rank, size: u32) -> impl Iterator<Item = Rank> {
    (0..size).filter(move |r| *r != me)
}

impl Kernel {
    /// Validates `call` for a member with `my_rank` in a world of `size`
    /// and returns the kernel with its communication plan.
    pub(crate) fn start(call: CollectiveCall, my_rank: Rank, size: u32) -> Result<(Kernel, Plan)> {
        let mut plan = Plan::default();
        let state = match call {
            CollectiveCall::Send { dst, buf, .. } => {
                check_rank(dst, size, "destination")?;
                if dst == my_rank {
                    return Err(MwError::protocol("send to own rank"));
                }
                plan.sends.push((dst, Some(buf)));
                State::SendOnly
            }
            CollectiveCall::Recv {
                src, dtype, len, ..
            } => {
                check_rank(src, size, "source")?;
                if src == my_rank {
                    return Err(MwError::protocol("recv from own rank"));
                }
                plan.recv_from.push(src);
                State::Single {
                    dtype,
                    len,
                    got: None,
                }
            }
            CollectiveCall::Broadcast { root, buf, .. } => {
                check_rank(root, size, "root")?;
                if root == my_rank {
                    plan.sends = others(my_rank, size)
                        .map(|r| (r, Some(buf.clone())))
                        .collect();
                    State::Fixed(buf)
                } else {
                    plan.recv_from.push(root);
                    State::Single {
                        dtype: buf.dtype(),
                        len: buf.len(),
                        got: None,
                    }
                }
            }
            CollectiveCall::Reduce { root, buf, op, .. } => {
                check_rank(root, size, "root")?;
                Self::fan_in(
                    &mut plan,
                    my_rank,
                    size,
                    root,
                    buf,
                    AfterCollect::Reduce(op),
                )
            }
            CollectiveCall::AllReduce { buf, op, .. } => {
                if my_rank == 0 {
                    plan.sends = others(0, size).map(|r| (r, None)).collect();
                    Self::fan_in(&mut plan, 0, size, 0, buf, AfterCollect::AllReduce(op))
                } else {
                    plan.sends.push((0, Some(buf.clone())));
                    plan.recv_from.push(0);
                    State::Single {
                        dtype: buf.dtype(),
                        len: buf.len(),
                        got: None,
                    }
                }
            }
            CollectiveCall::Gather { root, buf, .. } => {
                check_rank(root, size, "root")?;
                Self::fan_in(&mut plan, my_rank, size, root, buf, AfterCollect::Gather)
            }
            CollectiveCall::AllGather { buf, .. } => {
                plan.sends = others(my_rank, size)
                    .map(|r| (r, Some(buf.clone())))
                    .collect();
                plan.recv_from = others(my_rank, size).collect();
                let mut slots = vec![None; size as usize];
                let (dtype, len) = (buf.dtype(), buf.len());
                slots[my_rank as usize] = Some(buf);
                State::Collect {
                    dtype,
                    len,
                    slots,
                    remaining: size as usize - 1,
                    then: AfterCollect::Gather,
                    result: None,
                }
            }
            CollectiveCall::Scatter {
                root,
                mut parts,
                dtype,
                len,
                ..
            } => {
                check_rank(root, size, "root")?;
                if root == my_rank {
                    if parts.len() != size as usize {
                        return Err(MwError::protocol(format!(
                            "scatter needs {size} parts, got {}",
                            parts.len()
                        )));
                    }
                    if let Some(bad) = parts.iter().position(|p| !p.same_shape(dtype, len)) {
                        return Err(MwError::protocol(format!(
                            "scatter part {bad} is not {len} x {dtype}"
                        )));
                    }
                    let own = parts[my_rank as usize].clone();
                    plan.sends = parts
                        .drain(..)
                        .enumerate()
                        .filter(|(r, _)| *r as u32 != my_rank)
                        .map(|(r, b)| (r as u32, Some(b)))
                        .collect();
                    State::Fixed(own)
                } else {
                    plan.recv_from.push(root);
                    State::Single {
                        dtype,
                        len,
                        got: None,
                    }
                }
            }
        };
        Ok((
            Kernel {
                my_rank,
                size,
                state,
            },
            plan,
        ))
    }

    fn fan_in(
        plan: &mut Plan,
        my_rank: Rank,
        size: u32,
        root: Rank,
        buf: Buffer,
        then: AfterCollect,
    ) -> State {
        if my_rank != root {
            plan.sends.push((root, Some(buf)));
            return State::SendOnly;
        }
        plan.recv_from.extend(others(my_rank, size));
        let mut slots = vec![None; size as usize];
        let (dtype, len) = (buf.dtype(), buf.len());
        slots[my_rank as usize] = Some(buf);
        State::Collect {
            dtype,
            len,
            slots,
            remaining: size as usize - 1,
            then,
            result: None,
        }
    }

    /// Accepts the one frame expected from `from`. Returns payloads for
    /// sends that were planned without one.
    pub(crate) fn on_recv(&mut self, from: Rank, buf: Buffer) -> Result<Vec<(Rank, Buffer)>> {
        let shape_err = |dtype: DType, len: usize, b: &Buffer| {
            MwError::protocol(format!(
                "rank {from} sent {} x {}, expected {len} x {dtype}",
                b.len(),
                b.dtype()
            ))
        };
        match &mut self.state {
            State::Single { dtype, len, got } => {
                if !buf.same_shape(*dtype, *len) {
                    return Err(shape_err(*dtype, *len, &buf));
                }
                if got.is_some() {
                    return Err(MwError::protocol(format!(
                        "duplicate frame from rank {from}"
                    )));
                }
                *got = Some(buf);
                Ok(Vec::new())
            }
            State::Collect {
                dtype,
                len,
                slots,
                remaining,
                then,
                result,
            } => {
                if !buf.same_shape(*dtype, *len) {
                    return Err(shape_err(*dtype, *len, &buf));
                }
                let slot = &mut slots[from as usize];
                if slot.is_some() {
                    return Err(MwError::protocol(format!(
                        "duplicate frame from rank {from}"
                    )));
                }
                *slot = Some(buf);
                *remaining -= 1;
                if *remaining > 0 {
                    return Ok(Vec::new());
                }
                match *then {
                    AfterCollect::Gather => Ok(Vec::new()),
                    AfterCollect::Reduce(op) => {
                        *result = Some(fold_buffers(op, slots.iter().flatten())?);
                        Ok(Vec::new())
                    }
                    AfterCollect::AllReduce(op) => {
                        let r = fold_buffers(op, slots.iter().flatten())?;
                        let fills = others(self.my_rank, self.size)
                            .map(|p| (p, r.clone()))
                            .collect();
                        *result = Some(r);
                        Ok(fills)
                    }
                }
            }
            State::SendOnly | State::Fixed(_) => Err(MwError::protocol(format!(
                "unexpected frame from rank {from}"
            ))),
        }
    }

    /// The output at this rank. Only meaningful once every planned frame
    /// has been received and sent.
    pub(crate) fn finish(self) -> WorkResult {
        match self.state {
            State::SendOnly => WorkResult::Unit,
            State::Single { got, .. } => got.map(WorkResult::Buffer).unwrap_or(WorkResult::Unit),
            State::Fixed(b) => WorkResult::Buffer(b),
            State::Collect {
                slots,
                then,
                result,
                ..
            } => match then {
                AfterCollect::Gather => WorkResult::Buffers(slots.into_iter().flatten().collect()),
                AfterCollect::Reduce(_) | AfterCollect::AllReduce(_) => {
                    result.map(WorkResult::Buffer).unwrap_or(WorkResult::Unit)
                }
            },
        }
    }
}
