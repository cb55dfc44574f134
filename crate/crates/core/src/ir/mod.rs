//! The IR substrate: SSA operations with typed results, single-block regions,
//! attributes, and modules of named functions.
//!
//! Values are function-local ids. Operands reference results defined earlier
//! in the same region or arguments of an enclosing region; operations marked
//! isolated (launch bodies) may only reference their own region's values.

pub mod parser;
pub mod printer;
pub mod registry;
pub mod types;
pub mod verify;

pub use types::{ElemKind, TensorType, Type};

use crate::error::{Error, Result};
use std::collections::BTreeMap;

/// Function-local SSA value id.
pub type ValueId = u32;

/// Attribute values: integers, integer lists, strings and bare enum tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Attr {
    Int(i64),
    IntList(Vec<i64>),
    Str(String),
    Token(String),
}

impl Attr {
    pub fn as_int(&self) -> Option<i64> {
        match self {
            Attr::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[i64]> {
        match self {
            Attr::IntList(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_token(&self) -> Option<&str> {
        match self {
            Attr::Token(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Attr::Str(s) => Some(s),
            _ => None,
        }
    }
}

/// Source location, 1-based; (0, 0) for programmatically built ops.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Loc {
    pub line: u32,
    pub col: u32,
}

/// A single operation. `dialect.mnemonic` must be registered.
#[derive(Clone, Debug, PartialEq)]
pub struct Op {
    pub dialect: String,
    pub mnemonic: String,
    pub operands: Vec<ValueId>,
    pub results: Vec<ValueId>,
    pub result_types: Vec<Type>,
    pub attrs: BTreeMap<String, Attr>,
    pub regions: Vec<Region>,
    pub loc: Loc,
}

impl Op {
    pub fn name(&self) -> String {
        format!("{}.{}", self.dialect, self.mnemonic)
    }

    pub fn is(&self, dialect: &str, mnemonic: &str) -> bool {
        self.dialect == dialect && self.mnemonic == mnemonic
    }

    pub fn attr_int(&self, key: &str) -> Option<i64> {
        self.attrs.get(key).and_then(Attr::as_int)
    }

    pub fn attr_list(&self, key: &str) -> Option<&[i64]> {
        self.attrs.get(key).and_then(Attr::as_list)
    }

    pub fn attr_token(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(Attr::as_token)
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(Attr::as_str)
    }
}

/// A single-block region. The block may declare typed arguments.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Region {
    pub args: Vec<ValueId>,
    pub arg_types: Vec<Type>,
    pub ops: Vec<Op>,
}

impl Region {
    pub fn new() -> Region {
        Region::default()
    }
}

/// A named function: a single region whose arguments are the function
/// arguments, plus declared result types.
#[derive(Clone, Debug, PartialEq)]
pub struct Function {
    pub name: String,
    pub body: Region,
    pub result_types: Vec<Type>,
    /// Types of every value id allocated in this function, indexed by id.
    value_types: Vec<Type>,
}

impl Function {
    pub fn new(name: impl Into<String>) -> Function {
        Function {
            name: name.into(),
            body: Region::new(),
            result_types: vec![],
            value_types: vec![],
        }
    }

    /// Allocates a fresh value id of the given type.
    pub fn new_value(&mut self, ty: Type) -> ValueId {
        let id = self.value_types.len() as ValueId;
        self.value_types.push(ty);
        id
    }

    pub fn value_type(&self, v: ValueId) -> &Type {
        &self.value_types[v as usize]
    }

    pub fn value_count(&self) -> usize {
        self.value_types.len()
    }

    pub fn add_arg(&mut self, ty: Type) -> ValueId {
        let id = self.new_value(ty.clone());
        self.body.args.push(id);
        self.body.arg_types.push(ty);
        id
    }

    pub fn arg_types(&self) -> &[Type] {
        &self.body.arg_types
    }
}

/// A module: an ordered list of uniquely named functions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Module {
    pub functions: Vec<Function>,
}

impl Module {
    pub fn new() -> Module {
        Module::default()
    }

    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn function_mut(&mut self, name: &str) -> Option<&mut Function> {
        self.functions.iter_mut().find(|f| f.name == name)
    }

    /// Total number of operations, including nested regions. Used by pass
    /// traces.
    pub fn op_count(&self) -> usize {
        fn count_region(r: &Region) -> usize {
            r.ops.iter().map(|op| 1 + op.regions.iter().map(count_region).sum::<usize>()).sum()
        }
        self.functions.iter().map(|f| count_region(&f.body)).sum()
    }

    /// Set of `dialect` names appearing anywhere in the module.
    pub fn dialect_census(&self) -> std::collections::BTreeSet<String> {
        let mut out = std::collections::BTreeSet::new();
        fn walk(r: &Region, out: &mut std::collections::BTreeSet<String>) {
            for op in &r.ops {
                out.insert(op.dialect.clone());
                for reg in &op.regions {
                    walk(reg, out);
                }
            }
        }
        for f in &self.functions {
            walk(&f.body, &mut out);
        }
        out
    }
}

/// Fluent helper for building ops into a function.
pub struct OpBuilder {
    op: Op,
}

impl OpBuilder {
    pub fn new(dialect: &str, mnemonic: &str) -> OpBuilder {
        OpBuilder {
            op: Op {
                dialect: dialect.to_string(),
                mnemonic: mnemonic.to_string(),
                operands: vec![],
                results: vec![],
                result_types: vec![],
                attrs: BTreeMap::new(),
                regions: vec![],
                loc: Loc::default(),
            },
        }
    }

    pub fn operands(mut self, operands: &[ValueId]) -> Self {
        self.op.operands.extend_from_slice(operands);
        self
    }

    pub fn attr(mut self, key: &str, value: Attr) -> Self {
        self.op.attrs.insert(key.to_string(), value);
        self
    }

    pub fn attr_int(self, key: &str, value: i64) -> Self {
        self.attr(key, Attr::Int(value))
    }

    pub fn attr_list(self, key: &str, value: Vec<i64>) -> Self {
        self.attr(key, Attr::IntList(value))
    }

    pub fn attr_token(self, key: &str, value: &str) -> Self {
        self.attr(key, Attr::Token(value.to_string()))
    }

    pub fn attr_str(self, key: &str, value: &str) -> Self {
        self.attr(key, Attr::Str(value.to_string()))
    }

    pub fn region(mut self, region: Region) -> Self {
        self.op.regions.push(region);
        self
    }

    /// Allocates result values in `func`, returning the finished op and its
    /// result ids.
    pub fn results(mut self, func: &mut Function, types: &[Type]) -> (Op, Vec<ValueId>) {
        let ids: Vec<ValueId> = types.iter().map(|t| func.new_value(t.clone())).collect();
        self.op.results = ids.clone();
        self.op.result_types = types.to_vec();
        (self.op, ids)
    }

    pub fn no_results(self) -> Op {
        self.op
    }
}

/// Clones a region, remapping every value id defined inside it (region args
/// and op results) to fresh ids in `func`. External references (ids not
/// defined within `region`) are remapped through `map` when present, and kept
/// as-is otherwise.
pub fn clone_region_remapped(
    func: &mut Function,
    region: &Region,
    map: &mut std::collections::HashMap<ValueId, ValueId>,
) -> Region {
    let mut out = Region::new();
    for (arg, ty) in region.args.iter().zip(&region.arg_types) {
        let new = func.new_value(ty.clone());
        map.insert(*arg, new);
        out.args.push(new);
        out.arg_types.push(ty.clone());
    }
    for op in &region.ops {
        out.ops.push(clone_op_remapped(func, op, map));
    }
    out
}

pub fn clone_op_remapped(
    func: &mut Function,
    op: &Op,
    map: &mut std::collections::HashMap<ValueId, ValueId>,
) -> Op {
    let operands = op.operands.iter().map(|v| *map.get(v).unwrap_or(v)).collect();
    let mut results = Vec::with_capacity(op.results.len());
    for (r, ty) in op.results.iter().zip(&op.result_types) {
        let new = func.new_value(ty.clone());
        map.insert(*r, new);
        results.push(new);
    }
    let regions = op.regions.iter().map(|r| clone_region_remapped(func, r, map)).collect();
    Op {
        dialect: op.dialect.clone(),
        mnemonic: op.mnemonic.clone(),
        operands,
        results,
        result_types: op.result_types.clone(),
        attrs: op.attrs.clone(),
        regions,
        loc: op.loc,
    }
}

/// Looks up the single function of a module, the common case for kernels.
pub fn sole_function(module: &Module) -> Result<&Function> {
    match module.functions.len() {
        1 => Ok(&module.functions[0]),
        n => Err(Error::invalid(format!("expected exactly one function, found {}", n))),
    }
}
