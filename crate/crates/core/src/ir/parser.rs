//! Parser for the textual IR.
//!
//! Grammar sketch:
//!   module := func+
//!   func   := "func" "@"id "(" args ")" ("->" types)? "{" op* "}"
//!   op     := (results "=")? dialect "." mnemonic operands? attrs? ":" sig region*
//!           | "return" operands?
//!   attrs  := "{" id "=" attr ("," id "=" attr)* "}"
//!   region := "{" ("^(" args "):")? op* "}"
//! Comments begin with "//". Value names are function-scoped and unique.

use crate::error::{Error, Result};
use crate::ir::registry::registry;
use crate::ir::types::{ElemKind, TensorType, Type};
use crate::ir::{Attr, Function, Loc, Module, Op, Region, ValueId};
use std::collections::BTreeMap;
use std::collections::HashMap;

pub fn parse_module(text: &str) -> Result<Module> {
    let mut p = Parser::new(text);
    p.skip_ws();
    if p.at_eof() {
        return Err(p.err("expected 'func'"));
    }
    let mut module = Module::new();
    while !p.at_eof() {
        if !p.try_keyword("func") {
            return Err(p.err("expected 'func'"));
        }
        let func = p.parse_function()?;
        if module.functions.iter().any(|f| f.name == func.name) {
            return Err(p.err(format!("duplicate function name @{}", func.name)));
        }
        module.functions.push(func);
        p.skip_ws();
    }
    Ok(module)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    line: u32,
    col: u32,
}

struct Scope {
    names: HashMap<String, ValueId>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Parser<'a> {
        Parser { src: text.as_bytes(), pos: 0, line: 1, col: 1 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::syntax(self.line, self.col, msg)
    }

    fn at_eof(&self) -> bool {
        self.pos >= self.src.len()
    }

    fn peek(&self) -> u8 {
        if self.at_eof() {
            0
        } else {
            self.src[self.pos]
        }
    }

    fn bump(&mut self) -> u8 {
        let c = self.src[self.pos];
        self.pos += 1;
        if c == b'\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        c
    }

    fn skip_ws(&mut self) {
        loop {
            while !self.at_eof() && (self.peek() as char).is_whitespace() {
                self.bump();
            }
            if self.peek() == b'/' && self.src.get(self.pos + 1) == Some(&b'/') {
                while !self.at_eof() && self.peek() != b'\n' {
                    self.bump();
                }
            } else {
                return;
            }
        }
    }

    fn try_char(&mut self, c: u8) -> bool {
        self.skip_ws();
        if self.peek() == c {
            self.bump();
            true
        } else {
            false
        }
    }

    fn expect_char(&mut self, c: u8) -> Result<()> {
        if self.try_char(c) {
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", c as char)))
        }
    }

    fn try_str(&mut self, s: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(s.as_bytes()) {
            for _ in 0..s.len() {
                self.bump();
            }
            true
        } else {
            false
        }
    }

    /// Matches an identifier keyword with a word boundary after it.
    fn try_keyword(&mut self, kw: &str) -> bool {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        if rest.starts_with(kw.as_bytes()) {
            let after = rest.get(kw.len()).copied().unwrap_or(0);
            if !(after as char).is_alphanumeric() && after != b'_' {
                for _ in 0..kw.len() {
                    self.bump();
                }
                return true;
            }
        }
        false
    }

    fn parse_ident(&mut self) -> Result<String> {
        self.skip_ws();
        let c = self.peek() as char;
        if !(c.is_ascii_alphabetic() || c == '_') {
            return Err(self.err("expected identifier"));
        }
        let mut s = String::new();
        while !self.at_eof() {
            let c = self.peek() as char;
            if c.is_ascii_alphanumeric() || c == '_' {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        Ok(s)
    }

    fn parse_int(&mut self) -> Result<i64> {
        self.skip_ws();
        let mut s = String::new();
        if self.peek() == b'-' {
            s.push('-');
            self.bump();
        }
        if !(self.peek() as char).is_ascii_digit() {
            return Err(self.err("expected integer"));
        }
        while (self.peek() as char).is_ascii_digit() {
            s.push(self.bump() as char);
        }
        s.parse().map_err(|_| self.err("integer out of range"))
    }

    fn parse_value_name(&mut self) -> Result<String> {
        self.skip_ws();
        if self.peek() != b'%' {
            return Err(self.err("expected value name"));
        }
        self.bump();
        let mut s = String::new();
        while !self.at_eof() {
            let c = self.peek() as char;
            if c.is_ascii_alphanumeric() || c == '_' {
                s.push(c);
                self.bump();
            } else {
                break;
            }
        }
        if s.is_empty() {
            return Err(self.err("expected value name after '%'"));
        }
        Ok(s)
    }

    fn parse_string(&mut self) -> Result<String> {
        self.expect_char(b'"')?;
        let mut s = String::new();
        loop {
            if self.at_eof() {
                return Err(self.err("unterminated string"));
            }
            match self.bump() {
                b'"' => return Ok(s),
                b'\\' => {
                    let c = self.bump();
                    match c {
                        b'n' => s.push('\n'),
                        b't' => s.push('\t'),
                        other => s.push(other as char),
                    }
                }
                other => s.push(other as char),
            }
        }
    }

    fn parse_type(&mut self) -> Result<Type> {
        self.skip_ws();
        if self.try_keyword("i32") {
            return Ok(Type::Tensor(TensorType::scalar(ElemKind::I32)));
        }
        if self.try_keyword("i1") {
            return Ok(Type::Tensor(TensorType::scalar(ElemKind::I1)));
        }
        if self.try_keyword("tensor") {
            self.expect_char(b'<')?;
            return Ok(Type::Tensor(self.parse_tensor_body()?));
        }
        if self.peek() == b'!' {
            self.bump();
            let dialect = self.parse_ident()?;
            self.expect_char(b'.')?;
            let name = self.parse_ident()?;
            return self.parse_handle_type(&dialect, &name);
        }
        Err(self.err("expected type"))
    }

    /// Parses the `2x2xi32` body of a tensor type; the leading '<' has been
    /// consumed and this consumes the trailing '>'.
    fn parse_tensor_body(&mut self) -> Result<TensorType> {
        let mut shape = Vec::new();
        loop {
            self.skip_ws();
            if self.try_keyword("i32") {
                self.expect_char(b'>')?;
                return Ok(TensorType::new(shape, ElemKind::I32));
            }
            if self.try_keyword("i1") {
                self.expect_char(b'>')?;
                return Ok(TensorType::new(shape, ElemKind::I1));
            }
            let d = self.parse_int()?;
            if d < 0 {
                return Err(self.err("tensor extent must be nonnegative"));
            }
            shape.push(d as usize);
            if self.peek() != b'x' {
                return Err(self.err("expected 'x' in tensor shape"));
            }
            self.bump();
        }
    }

    fn parse_handle_type(&mut self, dialect: &str, name: &str) -> Result<Type> {
        match (dialect, name) {
            ("cnm", "workgroup") => {
                self.expect_char(b'<')?;
                let mut dims = vec![self.parse_int()? as usize];
                while self.peek() == b'x' {
                    self.bump();
                    dims.push(self.parse_int()? as usize);
                }
                self.expect_char(b'>')?;
                Ok(Type::Workgroup(dims))
            }
            ("cnm", "buffer") => {
                self.expect_char(b'<')?;
                self.skip_ws();
                let item = if self.try_keyword("tensor") {
                    self.expect_char(b'<')?;
                    self.parse_tensor_body()?
                } else if self.try_keyword("i32") {
                    TensorType::scalar(ElemKind::I32)
                } else if self.try_keyword("i1") {
                    TensorType::scalar(ElemKind::I1)
                } else {
                    return Err(self.err("expected buffer item type"));
                };
                self.expect_char(b',')?;
                let level = self.parse_int()? as usize;
                self.expect_char(b'>')?;
                Ok(Type::Buffer { item, level })
            }
            ("cnm", "token") => Ok(Type::Token),
            ("cim", "device") => Ok(Type::CimDevice),
            ("cim", "future") => {
                self.expect_char(b'<')?;
                self.skip_ws();
                let item = if self.try_keyword("tensor") {
                    self.expect_char(b'<')?;
                    self.parse_tensor_body()?
                } else if self.try_keyword("i32") {
                    TensorType::scalar(ElemKind::I32)
                } else if self.try_keyword("i1") {
                    TensorType::scalar(ElemKind::I1)
                } else {
                    return Err(self.err("expected future item type"));
                };
                self.expect_char(b'>')?;
                Ok(Type::CimFuture(item))
            }
            ("memristor", "device") => Ok(Type::MemDevice),
            ("upmem", "grid") => {
                self.expect_char(b'<')?;
                let ranks = self.parse_int()? as usize;
                self.expect_char(b'x')?;
                let dpus = self.parse_int()? as usize;
                self.expect_char(b'x')?;
                let tasklets = self.parse_int()? as usize;
                self.expect_char(b'>')?;
                Ok(Type::DpuGrid { ranks, dpus, tasklets })
            }
            _ => Err(self.err(format!("unknown type !{}.{}", dialect, name))),
        }
    }

    fn parse_type_tuple(&mut self) -> Result<Vec<Type>> {
        self.skip_ws();
        if self.try_char(b'(') {
            let mut types = Vec::new();
            if !self.try_char(b')') {
                loop {
                    types.push(self.parse_type()?);
                    if self.try_char(b')') {
                        break;
                    }
                    self.expect_char(b',')?;
                }
            }
            Ok(types)
        } else {
            Ok(vec![self.parse_type()?])
        }
    }

    fn parse_function(&mut self) -> Result<Function> {
        self.expect_char(b'@')?;
        let name = self.parse_ident()?;
        let mut func = Function::new(name);
        let mut scope = Scope { names: HashMap::new() };
        self.expect_char(b'(')?;
        if !self.try_char(b')') {
            loop {
                let vname = self.parse_value_name()?;
                self.expect_char(b':')?;
                let ty = self.parse_type()?;
                let id = func.add_arg(ty);
                if scope.names.insert(vname.clone(), id).is_some() {
                    return Err(self.err(format!("redefinition of %{}", vname)));
                }
                if self.try_char(b')') {
                    break;
                }
                self.expect_char(b',')?;
            }
        }
        if self.try_str("->") {
            func.result_types = self.parse_type_tuple()?;
        }
        self.expect_char(b'{')?;
        let ops = self.parse_op_list(&mut func, &mut scope)?;
        func.body.ops = ops;
        self.expect_char(b'}')?;
        Ok(func)
    }

    /// Parses ops until the closing '}' of the current block (not consumed).
    fn parse_op_list(&mut self, func: &mut Function, scope: &mut Scope) -> Result<Vec<Op>> {
        let mut ops = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == b'}' || self.at_eof() {
                return Ok(ops);
            }
            ops.push(self.parse_op(func, scope)?);
        }
    }

    fn parse_op(&mut self, func: &mut Function, scope: &mut Scope) -> Result<Op> {
        self.skip_ws();
        let loc = Loc { line: self.line, col: self.col };
        if self.try_keyword("return") {
            let mut operands = Vec::new();
            self.skip_ws();
            if self.peek() == b'%' {
                loop {
                    let name = self.parse_value_name()?;
                    operands.push(self.resolve(scope, &name)?);
                    if !self.try_char(b',') {
                        break;
                    }
                }
            }
            return Ok(Op {
                dialect: "core".into(),
                mnemonic: "return".into(),
                operands,
                results: vec![],
                result_types: vec![],
                attrs: BTreeMap::new(),
                regions: vec![],
                loc,
            });
        }

        // Optional results.
        let mut result_names = Vec::new();
        if self.peek() == b'%' {
            loop {
                result_names.push(self.parse_value_name()?);
                if !self.try_char(b',') {
                    break;
                }
            }
            self.expect_char(b'=')?;
        }

        let dialect = self.parse_ident()?;
        self.expect_char(b'.')?;
        let mnemonic = self.parse_ident()?;
        if !registry().is_known(&dialect, &mnemonic) {
            return Err(Error::syntax(
                loc.line,
                loc.col,
                format!("unknown operation {}.{}", dialect, mnemonic),
            ));
        }

        let mut operands = Vec::new();
        self.skip_ws();
        if self.peek() == b'%' {
            loop {
                let name = self.parse_value_name()?;
                operands.push(self.resolve(scope, &name)?);
                if !self.try_char(b',') {
                    break;
                }
            }
        }

        let mut attrs = BTreeMap::new();
        self.skip_ws();
        if self.peek() == b'{' {
            // Distinguish an attribute dict from a region: attrs are always
            // followed by ':' type-sig, and regions only appear after one.
            self.bump();
            loop {
                if self.try_char(b'}') {
                    break;
                }
                let key = self.parse_ident()?;
                self.expect_char(b'=')?;
                let value = self.parse_attr()?;
                attrs.insert(key, value);
                if self.try_char(b'}') {
                    break;
                }
                self.expect_char(b',')?;
            }
        }

        self.expect_char(b':')?;
        let (operand_types, result_types) =
            self.parse_type_sig(result_names.len(), operands.len())?;

        // Check operand types against the signature.
        if operand_types.len() != operands.len() {
            return Err(self.err(format!(
                "signature lists {} operand types but op has {} operands",
                operand_types.len(),
                operands.len()
            )));
        }
        for (v, expected) in operands.iter().zip(&operand_types) {
            let found = func.value_type(*v);
            if found != expected {
                return Err(self.err(format!(
                    "type mismatch on operand: expected {}, found {}",
                    expected, found
                )));
            }
        }
        if result_types.len() != result_names.len() {
            return Err(self.err(format!(
                "signature lists {} result types but op names {} results",
                result_types.len(),
                result_names.len()
            )));
        }
        let mut results = Vec::new();
        for (name, ty) in result_names.iter().zip(&result_types) {
            let id = func.new_value(ty.clone());
            if scope.names.insert(name.clone(), id).is_some() {
                return Err(self.err(format!("redefinition of %{}", name)));
            }
            results.push(id);
        }

        let mut regions = Vec::new();
        loop {
            self.skip_ws();
            if self.peek() == b'{' {
                self.bump();
                regions.push(self.parse_region(func, scope)?);
            } else {
                break;
            }
        }

        Ok(Op { dialect, mnemonic, operands, results, result_types, attrs, regions, loc })
    }

    fn parse_region(&mut self, func: &mut Function, scope: &mut Scope) -> Result<Region> {
        let mut region = Region::new();
        self.skip_ws();
        if self.peek() == b'^' {
            self.bump();
            self.expect_char(b'(')?;
            if !self.try_char(b')') {
                loop {
                    let vname = self.parse_value_name()?;
                    self.expect_char(b':')?;
                    let ty = self.parse_type()?;
                    let id = func.new_value(ty.clone());
                    if scope.names.insert(vname.clone(), id).is_some() {
                        return Err(self.err(format!("redefinition of %{}", vname)));
                    }
                    region.args.push(id);
                    region.arg_types.push(ty);
                    if self.try_char(b')') {
                        break;
                    }
                    self.expect_char(b',')?;
                }
            }
            self.expect_char(b':')?;
        }
        region.ops = self.parse_op_list(func, scope)?;
        self.expect_char(b'}')?;
        Ok(region)
    }

    fn parse_type_sig(&mut self, n_results: usize, n_operands: usize) -> Result<(Vec<Type>, Vec<Type>)> {
        self.skip_ws();
        if self.peek() == b'(' {
            self.bump();
            let mut operand_types = Vec::new();
            if !self.try_char(b')') {
                loop {
                    operand_types.push(self.parse_type()?);
                    if self.try_char(b')') {
                        break;
                    }
                    self.expect_char(b',')?;
                }
            }
            if !self.try_str("->") {
                return Err(self.err("expected '->'"));
            }
            self.skip_ws();
            let result_types = if self.peek() == b'(' {
                self.bump();
                let mut tys = Vec::new();
                if !self.try_char(b')') {
                    loop {
                        tys.push(self.parse_type()?);
                        if self.try_char(b')') {
                            break;
                        }
                        self.expect_char(b',')?;
                    }
                }
                tys
            } else {
                vec![self.parse_type()?]
            };
            Ok((operand_types, result_types))
        } else {
            // Short form: single type shared by all operands and one result.
            if n_results != 1 {
                return Err(self.err("short type form requires exactly one result"));
            }
            let ty = self.parse_type()?;
            Ok((vec![ty.clone(); n_operands], vec![ty]))
        }
    }

    fn parse_attr(&mut self) -> Result<Attr> {
        self.skip_ws();
        match self.peek() {
            b'[' => {
                self.bump();
                let mut vs = Vec::new();
                if !self.try_char(b']') {
                    loop {
                        vs.push(self.parse_int()?);
                        if self.try_char(b']') {
                            break;
                        }
                        self.expect_char(b',')?;
                    }
                }
                Ok(Attr::IntList(vs))
            }
            b'"' => Ok(Attr::Str(self.parse_string()?)),
            c if (c as char).is_ascii_digit() || c == b'-' => Ok(Attr::Int(self.parse_int()?)),
            _ => Ok(Attr::Token(self.parse_ident()?)),
        }
    }

    fn resolve(&self, scope: &Scope, name: &str) -> Result<ValueId> {
        scope
            .names
            .get(name)
            .copied()
            .ok_or_else(|| self.err(format!("use of undefined value %{}", name)))
    }
}
