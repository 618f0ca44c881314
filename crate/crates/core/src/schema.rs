//! Runtime property schemas and column (structure-of-arrays) storage.
//!
//! A schema is an ordered list of named property descriptors. Property values
//! are 64-bit reals or 64-bit integers, shaped as scalars, D-vectors, fixed
//! arrays, or variable-length lists of fixed-shape elements. Row
//! serialization is little-endian and byte-stable, which the mapping and
//! checkpoint layers rely on for bitwise roundtrips.

use crate::error::{usage, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseType {
    F64,
    I64,
}

/// Shape of one element of a variable-length list property.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemShape {
    Scalar,
    /// D components, bound to the set's dimension.
    Vector,
    FixedArray(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ElemDesc {
    pub shape: ElemShape,
    pub base: BaseType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PropKind {
    Scalar,
    Vector,
    FixedArray(usize),
    /// Variable-length list; nests at most one level by construction.
    VarList(ElemDesc),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropDesc {
    pub name: String,
    pub kind: PropKind,
    /// Base type of scalar/vector/array properties; var lists carry their
    /// element's base type instead.
    pub base: BaseType,
}

impl PropDesc {
    pub fn scalar_f64(name: &str) -> Self {
        PropDesc { name: name.into(), kind: PropKind::Scalar, base: BaseType::F64 }
    }

    pub fn scalar_i64(name: &str) -> Self {
        PropDesc { name: name.into(), kind: PropKind::Scalar, base: BaseType::I64 }
    }

    pub fn vector_f64(name: &str) -> Self {
        PropDesc { name: name.into(), kind: PropKind::Vector, base: BaseType::F64 }
    }

    pub fn fixed_f64(name: &str, n: usize) -> Self {
        PropDesc { name: name.into(), kind: PropKind::FixedArray(n), base: BaseType::F64 }
    }

    pub fn var_list_f64(name: &str, shape: ElemShape) -> Self {
        PropDesc {
            name: name.into(),
            kind: PropKind::VarList(ElemDesc { shape, base: BaseType::F64 }),
            base: BaseType::F64,
        }
    }

    /// Components per row (fixed kinds) or per list element (var lists).
    pub fn comps(&self, dim: usize) -> usize {
        match &self.kind {
            PropKind::Scalar => 1,
            PropKind::Vector => dim,
            PropKind::FixedArray(n) => *n,
            PropKind::VarList(e) => match e.shape {
                ElemShape::Scalar => 1,
                ElemShape::Vector => dim,
                ElemShape::FixedArray(n) => n,
            },
        }
    }

    pub fn is_var_list(&self) -> bool {
        matches!(self.kind, PropKind::VarList(_))
    }

    fn effective_base(&self) -> BaseType {
        match &self.kind {
            PropKind::VarList(e) => e.base,
            _ => self.base,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertySchema {
    props: Vec<PropDesc>,
}

impl PropertySchema {
    pub fn new(props: Vec<PropDesc>) -> Result<Self> {
        for i in 0..props.len() {
            if let PropKind::FixedArray(0) = props[i].kind {
                return Err(usage(format!("property '{}' has zero-length array", props[i].name)));
            }
            for j in 0..i {
                if props[i].name == props[j].name {
                    return Err(usage(format!("duplicate property name '{}'", props[i].name)));
                }
            }
        }
        Ok(PropertySchema { props })
    }

    pub fn empty() -> Self {
        PropertySchema { props: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.props.len()
    }

    pub fn is_empty(&self) -> bool {
        self.props.is_empty()
    }

    pub fn props(&self) -> &[PropDesc] {
        &self.props
    }

    pub fn prop(&self, i: usize) -> &PropDesc {
        &self.props[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.props.iter().position(|p| p.name == name)
    }

    /// Binary descriptor; self-describing files embed this.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.props.len() as u32).to_le_bytes());
        for p in &self.props {
            let name = p.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let (kind, extra, elem): (u8, u32, (u8, u8, u32)) = match &p.kind {
                PropKind::Scalar => (0, 0, (0, 0, 0)),
                PropKind::Vector => (1, 0, (0, 0, 0)),
                PropKind::FixedArray(n) => (2, *n as u32, (0, 0, 0)),
                PropKind::VarList(e) => {
                    let (es, ee) = match e.shape {
                        ElemShape::Scalar => (0u8, 0u32),
                        ElemShape::Vector => (1, 0),
                        ElemShape::FixedArray(n) => (2, n as u32),
                    };
                    (3, 0, (es, base_tag(e.base), ee))
                }
            };
            out.push(kind);
            out.push(base_tag(p.base));
            out.extend_from_slice(&extra.to_le_bytes());
            out.push(elem.0);
            out.push(elem.1);
            out.extend_from_slice(&elem.2.to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8], at: &mut usize) -> Result<Self> {
        let n = read_u32(buf, at)? as usize;
        let mut props = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = read_u16(buf, at)? as usize;
            let name = std::str::from_utf8(slice(buf, at, name_len)?)
                .map_err(|_| crate::Error::CorruptFile("schema name not utf-8".into()))?
                .to_string();
            let kind = read_u8(buf, at)?;
            let base = tag_base(read_u8(buf, at)?)?;
            let extra = read_u32(buf, at)?;
            let es = read_u8(buf, at)?;
            let eb = read_u8(buf, at)?;
            let ee = read_u32(buf, at)?;
            let kind = match kind {
                0 => PropKind::Scalar,
                1 => PropKind::Vector,
                2 => PropKind::FixedArray(extra as usize),
                3 => {
                    let shape = match es {
                        0 => ElemShape::Scalar,
                        1 => ElemShape::Vector,
                        2 => ElemShape::FixedArray(ee as usize),
                        t => {
                            return Err(crate::Error::CorruptFile(format!(
                                "bad element shape tag {t}"
                            )))
                        }
                    };
                    PropKind::VarList(ElemDesc { shape, base: tag_base(eb)? })
                }
                t => return Err(crate::Error::CorruptFile(format!("bad prop kind tag {t}"))),
            };
            props.push(PropDesc { name, kind, base });
        }
        PropertySchema::new(props)
    }
}

fn base_tag(b: BaseType) -> u8 {
    match b {
        BaseType::F64 => 0,
        BaseType::I64 => 1,
    }
}

fn tag_base(t: u8) -> Result<BaseType> {
    match t {
        0 => Ok(BaseType::F64),
        1 => Ok(BaseType::I64),
        _ => Err(crate::Error::CorruptFile(format!("bad base type tag {t}"))),
    }
}

/// One property column. Fixed-width kinds store `rows * comps` values
/// contiguously; var lists store one flat element buffer per row.
#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    F64 { comps: usize, data: Vec<f64> },
    I64 { comps: usize, data: Vec<i64> },
    VarF64 { comps: usize, data: Vec<Vec<f64>> },
    VarI64 { comps: usize, data: Vec<Vec<i64>> },
}

impl Column {
    pub fn new_for(desc: &PropDesc, dim: usize) -> Column {
        let comps = desc.comps(dim);
        match (desc.is_var_list(), desc.effective_base()) {
            (false, BaseType::F64) => Column::F64 { comps, data: Vec::new() },
            (false, BaseType::I64) => Column::I64 { comps, data: Vec::new() },
            (true, BaseType::F64) => Column::VarF64 { comps, data: Vec::new() },
            (true, BaseType::I64) => Column::VarI64 { comps, data: Vec::new() },
        }
    }

    pub fn rows(&self) -> usize {
        match self {
            Column::F64 { comps, data } => data.len() / comps,
            Column::I64 { comps, data } => data.len() / comps,
            Column::VarF64 { data, .. } => data.len(),
            Column::VarI64 { data, .. } => data.len(),
        }
    }

    pub fn comps(&self) -> usize {
        match self {
            Column::F64 { comps, .. }
            | Column::I64 { comps, .. }
            | Column::VarF64 { comps, .. }
            | Column::VarI64 { comps, .. } => *comps,
        }
    }

    /// Append `n` zero rows (empty lists for var columns).
    pub fn push_zero(&mut self, n: usize) {
        match self {
            Column::F64 { comps, data } => data.resize(data.len() + n * *comps, 0.0),
            Column::I64 { comps, data } => data.resize(data.len() + n * *comps, 0),
            Column::VarF64 { data, .. } => data.resize(data.len() + n, Vec::new()),
            Column::VarI64 { data, .. } => data.resize(data.len() + n, Vec::new()),
        }
    }

    pub fn truncate(&mut self, rows: usize) {
        match self {
            Column::F64 { comps, data } => data.truncate(rows * *comps),
            Column::I64 { comps, data } => data.truncate(rows * *comps),
            Column::VarF64 { data, .. } => data.truncate(rows),
            Column::VarI64 { data, .. } => data.truncate(rows),
        }
    }

    /// Stable selection of rows by index.
    pub fn gather(&self, idx: &[usize]) -> Column {
        match self {
            Column::F64 { comps, data } => {
                let mut out = Vec::with_capacity(idx.len() * comps);
                for &i in idx {
                    out.extend_from_slice(&data[i * comps..(i + 1) * comps]);
                }
                Column::F64 { comps: *comps, data: out }
            }
            Column::I64 { comps, data } => {
                let mut out = Vec::with_capacity(idx.len() * comps);
                for &i in idx {
                    out.extend_from_slice(&data[i * comps..(i + 1) * comps]);
                }
                Column::I64 { comps: *comps, data: out }
            }
            Column::VarF64 { comps, data } => {
                Column::VarF64 { comps: *comps, data: idx.iter().map(|&i| data[i].clone()).collect() }
            }
            Column::VarI64 { comps, data } => {
                Column::VarI64 { comps: *comps, data: idx.iter().map(|&i| data[i].clone()).collect() }
            }
        }
    }

    pub fn write_row(&self, row: usize, out: &mut Vec<u8>) {
        match self {
            Column::F64 { comps, data } => {
                for v in &data[row * comps..(row + 1) * comps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Column::I64 { comps, data } => {
                for v in &data[row * comps..(row + 1) * comps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Column::VarF64 { comps, data } => {
                let list = &data[row];
                out.extend_from_slice(&((list.len() / comps) as u64).to_le_bytes());
                for v in list {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Column::VarI64 { comps, data } => {
                let list = &data[row];
                out.extend_from_slice(&((list.len() / comps) as u64).to_le_bytes());
                for v in list {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }

    /// Parse one row from `buf` at `*at` and append it.
    pub fn read_row(&mut self, buf: &[u8], at: &mut usize) -> Result<()> {
        match self {
            Column::F64 { comps, data } => {
                for _ in 0..*comps {
                    data.push(read_f64(buf, at)?);
                }
            }
            Column::I64 { comps, data } => {
                for _ in 0..*comps {
                    data.push(read_i64(buf, at)?);
                }
            }
            Column::VarF64 { comps, data } => {
                let n = read_u64(buf, at)? as usize;
                let mut list = Vec::with_capacity(n * *comps);
                for _ in 0..n * *comps {
                    list.push(read_f64(buf, at)?);
                }
                data.push(list);
            }
            Column::VarI64 { comps, data } => {
                let n = read_u64(buf, at)? as usize;
                let mut list = Vec::with_capacity(n * *comps);
                for _ in 0..n * *comps {
                    list.push(read_i64(buf, at)?);
                }
                data.push(list);
            }
        }
        Ok(())
    }

    pub fn row_f64(&self, row: usize) -> &[f64] {
        match self {
            Column::F64 { comps, data } => &data[row * comps..(row + 1) * comps],
            _ => panic!("row_f64 on non-f64 column"),
        }
    }

    pub fn row_f64_mut(&mut self, row: usize) -> &mut [f64] {
        match self {
            Column::F64 { comps, data } => &mut data[row * *comps..(row + 1) * *comps],
            _ => panic!("row_f64_mut on non-f64 column"),
        }
    }

    pub fn f64_data(&self) -> &[f64] {
        match self {
            Column::F64 { data, .. } => data,
            _ => panic!("f64_data on non-f64 column"),
        }
    }

    pub fn f64_data_mut(&mut self) -> &mut Vec<f64> {
        match self {
            Column::F64 { data, .. } => data,
            _ => panic!("f64_data_mut on non-f64 column"),
        }
    }

    pub fn var_f64(&self, row: usize) -> &Vec<f64> {
        match self {
            Column::VarF64 { data, .. } => &data[row],
            _ => panic!("var_f64 on non-var column"),
        }
    }

    pub fn var_f64_mut(&mut self, row: usize) -> &mut Vec<f64> {
        match self {
            Column::VarF64 { data, .. } => &mut data[row],
            _ => panic!("var_f64_mut on non-var column"),
        }
    }

    /// Concatenate a column of the same kind and component count.
    pub fn append_column(&mut self, other: Column) -> Result<()> {
        match (self, other) {
            (Column::F64 { comps: a, data }, Column::F64 { comps: b, data: src }) if *a == b => {
                data.extend_from_slice(&src);
            }
            (Column::I64 { comps: a, data }, Column::I64 { comps: b, data: src }) if *a == b => {
                data.extend_from_slice(&src);
            }
            (Column::VarF64 { comps: a, data }, Column::VarF64 { comps: b, data: src })
                if *a == b =>
            {
                data.extend(src);
            }
            (Column::VarI64 { comps: a, data }, Column::VarI64 { comps: b, data: src })
                if *a == b =>
            {
                data.extend(src);
            }
            _ => return Err(usage("column kind mismatch")),
        }
        Ok(())
    }

    /// Parse one row from `buf` at `*at` and overwrite row `row` in place.
    pub fn overwrite_row(&mut self, row: usize, buf: &[u8], at: &mut usize) -> Result<()> {
        match self {
            Column::F64 { comps, data } => {
                for k in 0..*comps {
                    data[row * *comps + k] = read_f64(buf, at)?;
                }
            }
            Column::I64 { comps, data } => {
                for k in 0..*comps {
                    data[row * *comps + k] = read_i64(buf, at)?;
                }
            }
            Column::VarF64 { comps, data } => {
                let n = read_u64(buf, at)? as usize;
                let list = &mut data[row];
                list.clear();
                for _ in 0..n * *comps {
                    list.push(read_f64(buf, at)?);
                }
            }
            Column::VarI64 { comps, data } => {
                let n = read_u64(buf, at)? as usize;
                let list = &mut data[row];
                list.clear();
                for _ in 0..n * *comps {
                    list.push(read_i64(buf, at)?);
                }
            }
        }
        Ok(())
    }

    /// Parse one row from `buf` and merge it into row `row`.
    pub fn merge_row(
        &mut self,
        row: usize,
        buf: &[u8],
        at: &mut usize,
        op: &crate::particles::MergeOp,
    ) -> Result<()> {
        use crate::particles::MergeOp;
        match self {
            Column::F64 { comps, data } => {
                let slot = &mut data[row * *comps..(row + 1) * *comps];
                match op {
                    MergeOp::Sum => {
                        for s in slot.iter_mut() {
                            *s += read_f64(buf, at)?;
                        }
                    }
                    MergeOp::MaxReplace => {
                        for s in slot.iter_mut() {
                            *s = s.max(read_f64(buf, at)?);
                        }
                    }
                    MergeOp::Custom(f) => {
                        let mut contrib = Vec::with_capacity(*comps);
                        for _ in 0..*comps {
                            contrib.push(read_f64(buf, at)?);
                        }
                        f(slot, &contrib);
                    }
                    MergeOp::ListMerge => {
                        return Err(usage("LIST_MERGE requires a var-list column"))
                    }
                }
            }
            Column::I64 { comps, data } => {
                let slot = &mut data[row * *comps..(row + 1) * *comps];
                match op {
                    MergeOp::Sum => {
                        for s in slot.iter_mut() {
                            *s += read_i64(buf, at)?;
                        }
                    }
                    MergeOp::MaxReplace => {
                        for s in slot.iter_mut() {
                            *s = (*s).max(read_i64(buf, at)?);
                        }
                    }
                    _ => return Err(usage("unsupported merge on an integer column")),
                }
            }
            Column::VarF64 { comps, data } => match op {
                MergeOp::ListMerge => {
                    let n = read_u64(buf, at)? as usize;
                    let list = &mut data[row];
                    for _ in 0..n * *comps {
                        list.push(read_f64(buf, at)?);
                    }
                }
                _ => return Err(usage("var-list columns only support LIST_MERGE")),
            },
            Column::VarI64 { comps, data } => match op {
                MergeOp::ListMerge => {
                    let n = read_u64(buf, at)? as usize;
                    let list = &mut data[row];
                    for _ in 0..n * *comps {
                        list.push(read_i64(buf, at)?);
                    }
                }
                _ => return Err(usage("var-list columns only support LIST_MERGE")),
            },
        }
        Ok(())
    }

    /// Zero the values of rows in `range` (clears lists on var columns).
    pub fn zero_rows(&mut self, range: std::ops::Range<usize>) {
        match self {
            Column::F64 { comps, data } => data[range.start * *comps..range.end * *comps].fill(0.0),
            Column::I64 { comps, data } => data[range.start * *comps..range.end * *comps].fill(0),
            Column::VarF64 { data, .. } => data[range].iter_mut().for_each(|l| l.clear()),
            Column::VarI64 { data, .. } => data[range].iter_mut().for_each(|l| l.clear()),
        }
    }
}

// Little-endian read helpers shared by the mapping and io layers.

pub(crate) fn slice<'a>(buf: &'a [u8], at: &mut usize, len: usize) -> Result<&'a [u8]> {
    if *at + len > buf.len() {
        return Err(crate::Error::CorruptFile("unexpected end of buffer".into()));
    }
    let s = &buf[*at..*at + len];
    *at += len;
    Ok(s)
}

macro_rules! read_le {
    ($name:ident, $ty:ty) => {
        pub(crate) fn $name(buf: &[u8], at: &mut usize) -> Result<$ty> {
            let s = slice(buf, at, std::mem::size_of::<$ty>())?;
            Ok(<$ty>::from_le_bytes(s.try_into().unwrap()))
        }
    };
}

read_le!(read_u8, u8);
read_le!(read_u16, u16);
read_le!(read_u32, u32);
read_le!(read_u64, u64);
read_le!(read_i64, i64);
read_le!(read_f64, f64);
