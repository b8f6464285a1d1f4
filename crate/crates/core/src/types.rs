//! Domain value types: world identity, descriptors, typed buffers and
//! reduction operators.

use std::fmt;
use std::net::{SocketAddr, ToSocketAddrs};

use bytes::Bytes;

use crate::error::{MwError, Result};

/// Maximum length in bytes of a world name.
pub const MAX_WORLD_NAME: usize = 128;

/// A member's index inside one world. The same process may hold different
/// ranks in different worlds.
pub type Rank = u32;

/// Validated world name: 1..=128 bytes of `[A-Za-z0-9_-]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WorldName(String);

impl WorldName {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if is_valid_world_name(&name) {
            Ok(WorldName(name))
        } else {
            Err(MwError::protocol(format!("invalid world name {name:?}")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for WorldName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for WorldName {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

pub fn is_valid_world_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= MAX_WORLD_NAME
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// Everything a member needs to join one world.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldDescriptor {
    pub name: String,
    pub size: u32,
    pub my_rank: Rank,
    /// Rendezvous store endpoint, `host:port`.
    pub store_addr: String,
    /// Where this member accepts peer connections for the world. Port 0
    /// picks an ephemeral port; the bound address is what peers see.
    pub my_listen_addr: String,
}

impl WorldDescriptor {
    pub fn new(
        name: impl Into<String>,
        size: u32,
        my_rank: Rank,
        store_addr: impl Into<String>,
        my_listen_addr: impl Into<String>,
    ) -> Self {
        WorldDescriptor {
            name: name.into(),
            size,
            my_rank,
            store_addr: store_addr.into(),
            my_listen_addr: my_listen_addr.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_descriptor(self)
    }
}

/// Checks the descriptor invariants: valid name, `size >= 2`,
/// `my_rank < size`, and parseable endpoints.
pub fn validate_descriptor(d: &WorldDescriptor) -> Result<()> {
    if !is_valid_world_name(&d.name) {
        return Err(MwError::protocol(format!(
            "invalid world name {:?}",
            d.name
        )));
    }
    if d.size < 2 {
        return Err(MwError::protocol(format!(
            "world size must be at least 2, got {}",
            d.size
        )));
    }
    if d.my_rank >= d.size {
        return Err(MwError::protocol(format!(
            "rank out of range: {} >= size {}",
            d.my_rank, d.size
        )));
    }
    check_endpoint(&d.store_addr, "store address")?;
    check_endpoint(&d.my_listen_addr, "listen address")?;
    Ok(())
}

fn check_endpoint(addr: &str, what: &str) -> Result<()> {
    match addr.rsplit_once(':') {
        Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => Ok(()),
        _ => Err(MwError::protocol(format!(
            "{what} {addr:?} is not host:port"
        ))),
    }
}

pub(crate) fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .map_err(|e| MwError::protocol(format!("cannot resolve {addr:?}: {e}")))?
        .next()
        .ok_or_else(|| MwError::protocol(format!("{addr:?} resolved to nothing")))
}

/// Element type of a [`Buffer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
    U8,
}

impl DType {
    pub const ALL: [DType; 5] = [DType::F32, DType::F64, DType::I32, DType::I64, DType::U8];

    pub fn width(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
            DType::U8 => 1,
        }
    }

    /// Wire code; 0 is reserved for "no payload".
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::I32 => 3,
            DType::I64 => 4,
            DType::U8 => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::I32),
            4 => Some(DType::I64),
            5 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::U8 => "u8",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        DType::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Rust scalar types that can live in a [`Buffer`].
pub trait Element: Copy + Sized + 'static {
    const DTYPE: DType;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! element {
    ($t:ty, $d:expr) => {
        impl Element for $t {
            const DTYPE: DType = $d;
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

element!(f32, DType::F32);
element!(f64, DType::F64);
element!(i32, DType::I32);
element!(i64, DType::I64);
element!(u8, DType::U8);

/// A flat, typed, little-endian payload. Cloning is cheap: the bytes are
/// reference counted.
#[derive(Clone, PartialEq, Eq)]
pub struct Buffer {
    dtype: DType,
    len: usize,
    bytes: Bytes,
}

impl fmt::Debug for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Buffer")
            .field("dtype", &self.dtype)
            .field("len", &self.len)
            .finish()
    }
}

impl Buffer {
    pub fn from_slice<T: Element>(values: &[T]) -> Self {
        let mut out = Vec::with_capacity(values.len() * T::DTYPE.width());
        for v in values {
            v.write_le(&mut out);
        }
        Buffer {
            dtype: T::DTYPE,
            len: values.len(),
            bytes: Bytes::from(out),
        }
    }

    pub fn zeros(dtype: DType, len: usize) -> Self {
        Buffer {
            dtype,
            len,
            bytes: Bytes::from(vec![0u8; len * dtype.width()]),
        }
    }

    /// Wraps raw little-endian bytes; the length must be a whole number of
    /// elements.
    pub fn from_bytes(dtype: DType, bytes: impl Into<Bytes>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.len() % dtype.width() != 0 {
            return Err(MwError::protocol(format!(
                "{} bytes is not a whole number of {dtype} elements",
                bytes.len()
            )));
        }
        Ok(Buffer {
            dtype,
            len: bytes.len() / dtype.width(),
            bytes,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Element count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn bytes(&self) -> &Bytes {
        &self.bytes
    }

    pub fn byte_len(&self) -> usize {
        self.bytes.len()
    }

    pub fn to_vec<T: Element>(&self) -> Result<Vec<T>> {
        if T::DTYPE != self.dtype {
            return Err(MwError::protocol(format!(
                "buffer holds {}, requested {}",
                self.dtype,
                T::DTYPE
            )));
        }
        Ok(self
            .bytes
            .chunks_exact(self.dtype.width())
            .map(T::read_le)
            .collect())
    }

    pub fn same_shape(&self, dtype: DType, len: usize) -> bool {
        self.dtype == dtype && self.len == len
    }
}

/// Elementwise reduction operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Prod,
    Min,
    Max,
}

impl ReduceOp {
    pub const ALL: [ReduceOp; 4] = [ReduceOp::Sum, ReduceOp::Prod, ReduceOp::Min, ReduceOp::Max];

    pub fn parse(s: &str) -> Option<ReduceOp> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Some(ReduceOp::Sum),
            "prod" => Some(ReduceOp::Prod),
            "min" => Some(ReduceOp::Min),
            "max" => Some(ReduceOp::Max),
            _ => None,
        }
    }
}

macro_rules! fold_float {
    ($t:ty, $op:expr, $acc:expr, $rhs:expr) => {{
        const W: usize = std::mem::size_of::<$t>();
        for (a, b) in $acc.chunks_exact_mut(W).zip($rhs.chunks_exact(W)) {
            let x = <$t>::from_le_bytes((&*a).try_into().unwrap());
            let y = <$t>::from_le_bytes(b.try_into().unwrap());
            let r = match $op {
                ReduceOp::Sum => x + y,
                ReduceOp::Prod => x * y,
                ReduceOp::Min => x.min(y),
                ReduceOp::Max => x.max(y),
            };
            a.copy_from_slice(&r.to_le_bytes());
        }
    }};
}

macro_rules! fold_int {
    ($t:ty, $op:expr, $acc:expr, $rhs:expr) => {{
        const W: usize = std::mem::size_of::<$t>();
        for (a, b) in $acc.chunks_exact_mut(W).zip($rhs.chunks_exact(W)) {
            let x = <$t>::from_le_bytes((&*a).try_into().unwrap());
            let y = <$t>::from_le_bytes(b.try_into().unwrap());
            let r = match $op {
                ReduceOp::Sum => x.wrapping_add(y),
                ReduceOp::Prod => x.wrapping_mul(y),
                ReduceOp::Min => x.min(y),
                ReduceOp::Max => x.max(y),
            };
            a.copy_from_slice(&r.to_le_bytes());
        }
    }};
}

/// `acc = acc ⊕ rhs`, elementwise. Integers wrap on overflow; floats use
/// IEEE arithmetic and `min`/`max` that ignore a single NaN operand.
pub(crate) fn combine_into(op: ReduceOp, dtype: DType, acc: &mut [u8], rhs: &[u8]) {
    debug_assert_eq!(acc.len(), rhs.len());
    match dtype {
        DType::F32 => fold_float!(f32, op, acc, rhs),
        DType::F64 => fold_float!(f64, op, acc, rhs),
        DType::I32 => fold_int!(i32, op, acc, rhs),
        DType::I64 => fold_int!(i64, op, acc, rhs),
        DType::U8 => fold_int!(u8, op, acc, rhs),
    }
}

/// Folds buffers in the order given: `((b0 ⊕ b1) ⊕ b2) ⊕ ...`. All inputs
/// must share dtype and length.
pub fn fold_buffers<'a>(
    op: ReduceOp,
    inputs: impl IntoIterator<Item = &'a Buffer>,
) -> Result<Buffer> {
    let mut it = inputs.into_iter();
    let first = it
        .next()
        .ok_or_else(|| MwError::protocol("reduction over zero buffers"))?;
    let mut acc = first.as_bytes().to_vec();
    for b in it {
        if !b.same_shape(first.dtype, first.len) {
            return Err(MwError::protocol(format!(
                "reduction shape mismatch: {}x{} vs {}x{}",
                first.dtype, first.len, b.dtype, b.len
            )));
        }
        combine_into(op, first.dtype, &mut acc, b.as_bytes());
    }
    Buffer::from_bytes(first.dtype, acc)
}
