//! Type system: dense integer tensors plus a small closed set of device
//! handle types used by the lower dialects.

use std::fmt;

/// Element kind of a tensor. `i32` is the arithmetic type, `i1` the logic
/// type; there are no others.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ElemKind {
    I32,
    I1,
}

impl fmt::Display for ElemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElemKind::I32 => write!(f, "i32"),
            ElemKind::I1 => write!(f, "i1"),
        }
    }
}

/// Shaped tensor type. Rank 0 denotes a scalar and prints as a bare element
/// kind (`i32`, `i1`).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorType {
    pub shape: Vec<usize>,
    pub elem: ElemKind,
}

impl TensorType {
    pub fn new(shape: Vec<usize>, elem: ElemKind) -> Self {
        TensorType { shape, elem }
    }

    pub fn scalar(elem: ElemKind) -> Self {
        TensorType { shape: vec![], elem }
    }

    pub fn i32(shape: Vec<usize>) -> Self {
        TensorType::new(shape, ElemKind::I32)
    }

    pub fn i1(shape: Vec<usize>) -> Self {
        TensorType::new(shape, ElemKind::I1)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }
}

impl fmt::Display for TensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.shape.is_empty() {
            return write!(f, "{}", self.elem);
        }
        write!(f, "tensor<")?;
        for d in &self.shape {
            write!(f, "{}x", d)?;
        }
        write!(f, "{}>", self.elem)
    }
}

/// Any SSA value type: tensors or opaque device handles.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Type {
    Tensor(TensorType),
    /// `!cnm.workgroup<4x16>` — logical resource tree; dims are the tree
    /// levels, leaves are compute elements.
    Workgroup(Vec<usize>),
    /// `!cnm.buffer<tensor<16xi32>, 2>` — opaque distributed buffer holding
    /// one `item` per node at tree level `level` (0 is the root).
    Buffer { item: TensorType, level: usize },
    /// `!cnm.token` — launch completion token consumed by `cnm.wait`.
    Token,
    /// `!cim.device` — an acquired crossbar device handle.
    CimDevice,
    /// `!cim.future<tensor<..>>` — result of `cim.execute`, readable only
    /// through `cim.barrier`.
    CimFuture(TensorType),
    /// `!memristor.device` — a checked-out crossbar from the device pool.
    MemDevice,
    /// `!upmem.grid<1x4x16>` — allocated DPU grid (ranks x dpus x tasklets).
    DpuGrid { ranks: usize, dpus: usize, tasklets: usize },
}

impl Type {
    pub fn tensor(&self) -> Option<&TensorType> {
        match self {
            Type::Tensor(t) => Some(t),
            _ => None,
        }
    }

    pub fn is_scalar_of(&self, elem: ElemKind) -> bool {
        matches!(self, Type::Tensor(t) if t.shape.is_empty() && t.elem == elem)
    }
}

impl From<TensorType> for Type {
    fn from(t: TensorType) -> Type {
        Type::Tensor(t)
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Tensor(t) => write!(f, "{}", t),
            Type::Workgroup(dims) => {
                write!(f, "!cnm.workgroup<")?;
                write_dims(f, dims)?;
                write!(f, ">")
            }
            Type::Buffer { item, level } => write!(f, "!cnm.buffer<{}, {}>", item, level),
            Type::Token => write!(f, "!cnm.token"),
            Type::CimDevice => write!(f, "!cim.device"),
            Type::CimFuture(t) => write!(f, "!cim.future<{}>", t),
            Type::MemDevice => write!(f, "!memristor.device"),
            Type::DpuGrid { ranks, dpus, tasklets } => {
                write!(f, "!upmem.grid<{}x{}x{}>", ranks, dpus, tasklets)
            }
        }
    }
}

fn write_dims(f: &mut fmt::Formatter<'_>, dims: &[usize]) -> fmt::Result {
    for (i, d) in dims.iter().enumerate() {
        if i > 0 {
            write!(f, "x")?;
        }
        write!(f, "{}", d)?;
    }
    Ok(())
}

/// Shorthand for a rank-0 i32 tensor type (index arithmetic, counters).
pub fn scalar_i32() -> Type {
    Type::Tensor(TensorType::scalar(ElemKind::I32))
}

/// Shorthand for a rank-0 i1 tensor type.
pub fn scalar_i1() -> Type {
    Type::Tensor(TensorType::scalar(ElemKind::I1))
}
