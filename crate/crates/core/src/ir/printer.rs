//! Canonical textual form. Printing renumbers values densely from %0 per
//! function, sorts attributes alphabetically (BTreeMap order), emits one op
//! per line with two-space region indentation. Two structurally equal modules
//! always print identically, which is what the golden tests rely on.

use crate::ir::{Attr, Function, Module, Op, Region, Type, ValueId};
use std::collections::HashMap;
use std::fmt::Write;

pub fn print_module(module: &Module) -> String {
    let mut out = String::new();
    for (i, func) in module.functions.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        print_function(&mut out, func);
    }
    out
}

fn print_function(out: &mut String, func: &Function) {
    let mut names: HashMap<ValueId, u32> = HashMap::new();
    let mut next = 0u32;
    for a in &func.body.args {
        names.entry(*a).or_insert_with(|| {
            let n = next;
            next += 1;
            n
        });
    }
    number_region(&func.body, &mut names, &mut next, true);

    write!(out, "func @{}(", func.name).unwrap();
    for (i, (a, ty)) in func.body.args.iter().zip(&func.body.arg_types).enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write!(out, "%{}: {}", names[a], ty).unwrap();
    }
    out.push(')');
    if !func.result_types.is_empty() {
        out.push_str(" -> ");
        print_type_tuple(out, &func.result_types);
    }
    out.push_str(" {\n");
    for op in &func.body.ops {
        print_op(out, func, op, &names, 1);
    }
    out.push_str("}\n");
}

fn number_region(region: &Region, names: &mut HashMap<ValueId, u32>, next: &mut u32, top: bool) {
    if !top {
        for a in &region.args {
            names.entry(*a).or_insert_with(|| {
                let n = *next;
                *next += 1;
                n
            });
        }
    }
    for op in &region.ops {
        for r in &op.results {
            names.entry(*r).or_insert_with(|| {
                let n = *next;
                *next += 1;
                n
            });
        }
        for reg in &op.regions {
            number_region(reg, names, next, false);
        }
    }
}

fn print_type_tuple(out: &mut String, types: &[Type]) {
    if types.len() == 1 {
        write!(out, "{}", types[0]).unwrap();
    } else {
        out.push('(');
        for (i, t) in types.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            write!(out, "{}", t).unwrap();
        }
        out.push(')');
    }
}

fn print_op(out: &mut String, func: &Function, op: &Op, names: &HashMap<ValueId, u32>, indent: usize) {
    let pad = "  ".repeat(indent);
    out.push_str(&pad);
    if op.is("core", "return") {
        out.push_str("return");
        for (i, o) in op.operands.iter().enumerate() {
            out.push_str(if i == 0 { " " } else { ", " });
            write!(out, "%{}", names[o]).unwrap();
        }
        out.push('\n');
        return;
    }
    for (i, r) in op.results.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write!(out, "%{}", names[r]).unwrap();
    }
    if !op.results.is_empty() {
        out.push_str(" = ");
    }
    write!(out, "{}.{}", op.dialect, op.mnemonic).unwrap();
    for (i, o) in op.operands.iter().enumerate() {
        out.push_str(if i == 0 { " " } else { ", " });
        write!(out, "%{}", names[o]).unwrap();
    }
    if !op.attrs.is_empty() {
        out.push_str(" {");
        for (i, (k, v)) in op.attrs.iter().enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            write!(out, "{} = ", k).unwrap();
            print_attr(out, v);
        }
        out.push('}');
    }
    out.push_str(" : ");
    print_type_sig(out, func, op);
    for region in &op.regions {
        out.push_str(" {\n");
        print_region(out, func, region, names, indent + 1);
        out.push_str(&pad);
        out.push('}');
    }
    out.push('\n');
}

fn print_region(
    out: &mut String,
    func: &Function,
    region: &Region,
    names: &HashMap<ValueId, u32>,
    indent: usize,
) {
    if !region.args.is_empty() {
        let pad = "  ".repeat(indent - 1);
        out.push_str(&pad);
        out.push_str("^(");
        for (i, (a, ty)) in region.args.iter().zip(&region.arg_types).enumerate() {
            if i > 0 {
                out.push_str(", ");
            }
            write!(out, "%{}: {}", names[a], ty).unwrap();
        }
        out.push_str("):\n");
    }
    for op in &region.ops {
        print_op(out, func, op, names, indent);
    }
}

/// Short form `: T` when the op has exactly one result and every operand
/// shares its type; full `(..) -> (..)` signature otherwise.
fn print_type_sig(out: &mut String, func: &Function, op: &Op) {
    let operand_types: Vec<&Type> = op.operands.iter().map(|o| func.value_type(*o)).collect();
    let short = op.result_types.len() == 1
        && operand_types.iter().all(|t| **t == op.result_types[0]);
    if short {
        write!(out, "{}", op.result_types[0]).unwrap();
        return;
    }
    out.push('(');
    for (i, t) in operand_types.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        write!(out, "{}", t).unwrap();
    }
    out.push_str(") -> ");
    match op.result_types.len() {
        0 => out.push_str("()"),
        1 => write!(out, "{}", op.result_types[0]).unwrap(),
        _ => {
            out.push('(');
            for (i, t) in op.result_types.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write!(out, "{}", t).unwrap();
            }
            out.push(')');
        }
    }
}

fn print_attr(out: &mut String, attr: &Attr) {
    match attr {
        Attr::Int(v) => write!(out, "{}", v).unwrap(),
        Attr::IntList(vs) => {
            out.push('[');
            for (i, v) in vs.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write!(out, "{}", v).unwrap();
            }
            out.push(']');
        }
        Attr::Str(s) => write!(out, "{:?}", s).unwrap(),
        Attr::Token(t) => out.push_str(t),
    }
}
