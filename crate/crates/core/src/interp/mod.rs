//! One tree-walking evaluator for every abstraction level.
//!
//! The pure interpreter (no device state) is the numerical oracle: it rejects
//! device ops and evaluates compute ops with wrapping i32 semantics. The same
//! evaluator with device models attached executes cnm logical modules, the
//! DPU-grid form, and the memristor form, maintaining deterministic traffic
//! and event counters as it goes.

use crate::error::{Error, Result};
use crate::ir::types::{ElemKind, TensorType, Type};
use crate::ir::{Function, Module, Op, Region, ValueId};
use crate::semantics::{self, LogicKind, MergeKind, Metric, ReduceKind};
use crate::tensor::{row_major_strides, TensorValue};
use crate::upmem::{align8, grid_shape, UpmemSpec};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

#[derive(Clone, Debug)]
pub enum Value {
    Tensor(TensorValue),
    Workgroup(usize),
    Buffer(usize),
    Token(usize),
    CimDevice(usize),
    CimFuture(usize),
    MemDevice(usize),
    Grid(usize),
}

impl Value {
    pub fn tensor(&self) -> Result<&TensorValue> {
        match self {
            Value::Tensor(t) => Ok(t),
            _ => Err(Error::exec("expected a tensor value")),
        }
    }

    fn scalar(&self) -> Result<i32> {
        self.tensor()?.unwrap_scalar()
    }
}

/// Execution configuration; the device models read their geometry from here
/// unless the ops carry it themselves.
#[derive(Clone, Debug)]
pub struct ExecConfig {
    /// Pure-oracle mode rejects device dialects entirely.
    pub allow_devices: bool,
    pub cim_pool: usize,
    pub upmem: UpmemSpec,
    /// Evaluate workgroup leaves in reverse order (order-independence tests).
    pub reverse_leaves: bool,
    /// Simulate tasklets in reverse order between barriers.
    pub reverse_tasklets: bool,
}

impl Default for ExecConfig {
    fn default() -> ExecConfig {
        ExecConfig {
            allow_devices: true,
            cim_pool: crate::cim::DEFAULT_POOL,
            upmem: UpmemSpec::default(),
            reverse_leaves: false,
            reverse_tasklets: false,
        }
    }
}

impl ExecConfig {
    pub fn oracle() -> ExecConfig {
        ExecConfig { allow_devices: false, ..ExecConfig::default() }
    }
}

#[derive(Clone, Debug)]
struct CnmBuffer {
    item: TensorType,
    /// Workgroup dims the buffer was allocated on.
    wg_dims: Vec<usize>,
    /// Tree level; node coordinates are the first `level` workgroup dims.
    level: usize,
    /// One dense instance per node at the buffer's level.
    instances: Vec<Vec<i32>>,
}

#[derive(Clone, Debug, PartialEq)]
enum CimDeviceState {
    Free,
    Acquired,
    Programmed,
}

#[derive(Clone, Debug)]
struct CimSlot {
    state: CimDeviceState,
}

#[derive(Clone, Debug, Default)]
struct Crossbar {
    in_use: bool,
    programmed: Option<(Vec<i32>, usize, usize)>,
}

#[derive(Clone, Debug)]
struct DpuMem {
    words: Vec<i32>,
}

#[derive(Clone, Debug)]
struct GridState {
    ranks: usize,
    dpus: usize,
    tasklets: usize,
    mram: Vec<DpuMem>,
}

#[derive(Clone, Copy, Debug)]
struct KernelCtx {
    grid: usize,
    dpu_index: usize,
    tasklet: usize,
}

/// All mutable simulation state: device pools, memories, counters.
pub struct SimState {
    pub cfg: ExecConfig,
    pub counters: BTreeMap<String, u64>,
    workgroups: Vec<Vec<usize>>,
    buffers: Vec<CnmBuffer>,
    tokens: usize,
    cim_pool: Vec<CimSlot>,
    cim_futures: Vec<Option<TensorValue>>,
    crossbars: Vec<Crossbar>,
    grids: Vec<GridState>,
    kctx: Option<KernelCtx>,
}

impl SimState {
    pub fn new(cfg: ExecConfig) -> SimState {
        let cim_pool = (0..cfg.cim_pool).map(|_| CimSlot { state: CimDeviceState::Free }).collect();
        SimState {
            cfg,
            counters: BTreeMap::new(),
            workgroups: vec![],
            buffers: vec![],
            tokens: 0,
            cim_pool,
            cim_futures: vec![],
            crossbars: vec![],
            grids: vec![],
            kctx: None,
        }
    }

    pub fn bump(&mut self, key: &str, by: u64) {
        *self.counters.entry(key.to_string()).or_insert(0) += by;
    }
}

pub struct Evaluator<'m> {
    pub module: &'m Module,
    pub state: SimState,
}

/// Runs the pure reference interpreter; device ops are rejected.
pub fn interpret(module: &Module, func: &str, args: &[TensorValue]) -> Result<Vec<TensorValue>> {
    let mut ev = Evaluator::new(module, ExecConfig::oracle());
    ev.run(func, args)
}

/// Runs a module against the device models and returns results plus the
/// deterministic counter map.
pub fn simulate(
    module: &Module,
    func: &str,
    args: &[TensorValue],
    cfg: ExecConfig,
) -> Result<(Vec<TensorValue>, BTreeMap<String, u64>)> {
    let mut ev = Evaluator::new(module, cfg);
    let results = ev.run(func, args)?;
    Ok((results, ev.state.counters))
}

impl<'m> Evaluator<'m> {
    pub fn new(module: &'m Module, cfg: ExecConfig) -> Evaluator<'m> {
        Evaluator { module, state: SimState::new(cfg) }
    }

    pub fn run(&mut self, func: &str, args: &[TensorValue]) -> Result<Vec<TensorValue>> {
        let func = self
            .module
            .function(func)
            .ok_or_else(|| Error::exec(format!("no function @{}", func)))?;
        if args.len() != func.body.args.len() {
            return Err(Error::exec(format!(
                "@{} takes {} arguments, got {}",
                func.name,
                func.body.args.len(),
                args.len()
            )));
        }
        let mut env: HashMap<ValueId, Value> = HashMap::new();
        for ((id, ty), arg) in func.body.args.iter().zip(func.arg_types()).zip(args) {
            let expected = ty.tensor().ok_or_else(|| Error::exec("arguments must be tensors"))?;
            if arg.ty != *expected {
                return Err(Error::exec(format!(
                    "argument type mismatch: expected {}, found {}",
                    expected, arg.ty
                )));
            }
            env.insert(*id, Value::Tensor(arg.clone()));
        }
        let mut returned = None;
        for op in &func.body.ops {
            if op.is("core", "return") {
                let mut out = Vec::new();
                for o in &op.operands {
                    out.push(env[o].tensor()?.clone());
                }
                returned = Some(out);
                break;
            }
            self.eval_op(func, op, &mut env)?;
        }
        returned.ok_or_else(|| Error::exec("function did not return"))
    }

    /// Evaluates a region's ops; if the region ends in core.yield, returns
    /// the yielded values.
    fn eval_region(
        &mut self,
        func: &Function,
        region: &Region,
        env: &mut HashMap<ValueId, Value>,
    ) -> Result<Option<Vec<Value>>> {
        for op in &region.ops {
            if op.is("core", "yield") {
                let vals = op.operands.iter().map(|o| env[o].clone()).collect();
                return Ok(Some(vals));
            }
            self.eval_op(func, op, env)?;
        }
        Ok(None)
    }

    fn eval_op(
        &mut self,
        func: &Function,
        op: &Op,
        env: &mut HashMap<ValueId, Value>,
    ) -> Result<()> {
        match op.dialect.as_str() {
            "core" => self.eval_core(func, op, env),
            "cinm" => self.eval_cinm(op, env),
            "cnm" => self.check_devices(op).and_then(|_| self.eval_cnm(func, op, env)),
            "cim" => self.check_devices(op).and_then(|_| self.eval_cim(op, env)),
            "memristor" => self.check_devices(op).and_then(|_| self.eval_memristor(op, env)),
            "upmem" => self.check_devices(op).and_then(|_| self.eval_upmem(func, op, env)),
            other => Err(Error::exec(format!("unknown dialect '{}'", other))),
        }
    }

    fn check_devices(&self, op: &Op) -> Result<()> {
        if !self.state.cfg.allow_devices {
            return Err(Error::exec(format!(
                "device operation {} is not part of the reference interpreter's domain",
                op.name()
            )));
        }
        Ok(())
    }

    fn set(
        &mut self,
        env: &mut HashMap<ValueId, Value>,
        op: &Op,
        values: Vec<Value>,
    ) -> Result<()> {
        // Destination-passing (bufferized) form: write the single result into
        // the trailing destination operand's slot.
        if op.attrs.contains_key("dst") {
            let dst = *op.operands.last().ok_or_else(|| Error::exec("missing destination"))?;
            let v = values.into_iter().next().ok_or_else(|| Error::exec("missing value"))?;
            env.insert(dst, v);
            return Ok(());
        }
        debug_assert_eq!(values.len(), op.results.len());
        for (r, v) in op.results.iter().zip(values) {
            env.insert(*r, v);
        }
        Ok(())
    }

    // ---- core ----------------------------------------------------------

    fn eval_core(
        &mut self,
        func: &Function,
        op: &Op,
        env: &mut HashMap<ValueId, Value>,
    ) -> Result<()> {
        match op.mnemonic.as_str() {
            "constant" => {
                let ty = op.result_types[0].tensor().unwrap().clone();
                let data: Vec<i32> = match (&op.attrs["value"], ty.element_count()) {
                    (crate::ir::Attr::Int(v), 1) => vec![*v as i32],
                    (crate::ir::Attr::IntList(vs), n) if vs.len() == n => {
                        vs.iter().map(|v| *v as i32).collect()
                    }
                    _ => return Err(Error::exec("malformed constant")),
                };
                self.set(env, op, vec![Value::Tensor(TensorValue::new(ty, data)?)])
            }
            "splat" => {
                let ty = op.result_types[0].tensor().unwrap().clone();
                let v = if let Some(x) = op.attr_int("value") {
                    x as i32
                } else {
                    env[&op.operands[0]].scalar()?
                };
                self.set(env, op, vec![Value::Tensor(TensorValue::splat(ty, v)?)])
            }
            "extract_slice" => {
                let src = env[&op.operands[0]].tensor()?.clone();
                let offs = self.offsets(&op.operands[1..], env)?;
                let sizes: Vec<usize> =
                    op.attr_list("sizes").unwrap().iter().map(|s| *s as usize).collect();
                let out = extract_slice(&src, &offs, &sizes)?;
                self.set(env, op, vec![Value::Tensor(out)])
            }
            "insert_slice" => {
                let dst = env[&op.operands[0]].tensor()?.clone();
                let val = env[&op.operands[1]].tensor()?.clone();
                let offs = self.offsets(&op.operands[2..], env)?;
                let out = insert_slice(&dst, &val, &offs)?;
                self.set(env, op, vec![Value::Tensor(out)])
            }
            "reshape" => {
                let src = env[&op.operands[0]].tensor()?.clone();
                let ty = op.result_types[0].tensor().unwrap().clone();
                self.set(env, op, vec![Value::Tensor(TensorValue {
                    ty,
                    data: src.data.clone(),
                })])
            }
            "permute" => {
                let src = env[&op.operands[0]].tensor()?.clone();
                let perm: Vec<usize> =
                    op.attr_list("perm").unwrap().iter().map(|p| *p as usize).collect();
                self.set(env, op, vec![Value::Tensor(permute(&src, &perm)?)])
            }
            "gather" => {
                let src = env[&op.operands[0]].tensor()?.clone();
                let idx = env[&op.operands[1]].tensor()?.clone();
                let mut data = Vec::with_capacity(idx.data.len());
                for i in idx.data.iter() {
                    let i = *i;
                    if i < 0 || i as usize >= src.data.len() {
                        return Err(Error::exec(format!("gather index {} out of range", i)));
                    }
                    data.push(src.data[i as usize]);
                }
                let ty = op.result_types[0].tensor().unwrap().clone();
                self.set(env, op, vec![Value::Tensor(TensorValue::new(ty, data)?)])
            }
            "scatter" => {
                // First write wins; out-of-range destinations are skipped.
                let dst = env[&op.operands[0]].tensor()?.clone();
                let idx = env[&op.operands[1]].tensor()?.clone();
                let val = env[&op.operands[2]].tensor()?.clone();
                let mut data = dst.data.as_ref().clone();
                let mut written = vec![false; data.len()];
                for (i, v) in idx.data.iter().zip(val.data.iter()) {
                    let i = *i;
                    if i < 0 || i as usize >= data.len() {
                        continue;
                    }
                    if !written[i as usize] {
                        written[i as usize] = true;
                        data[i as usize] = *v;
                    }
                }
                self.set(env, op, vec![Value::Tensor(TensorValue::new(dst.ty.clone(), data)?)])
            }
            "cast" => {
                let src = env[&op.operands[0]].tensor()?.clone();
                let ty = op.result_types[0].tensor().unwrap().clone();
                let data: Vec<i32> = match (src.ty.elem, ty.elem) {
                    (ElemKind::I32, ElemKind::I1) => {
                        src.data.iter().map(|v| (*v != 0) as i32).collect()
                    }
                    _ => src.data.as_ref().clone(),
                };
                self.set(env, op, vec![Value::Tensor(TensorValue::new(ty, data)?)])
            }
            "addi" | "subi" | "muli" => {
                let a = env[&op.operands[0]].scalar()?;
                let b = env[&op.operands[1]].scalar()?;
                let r = match op.mnemonic.as_str() {
                    "addi" => a.wrapping_add(b),
                    "subi" => a.wrapping_sub(b),
                    _ => a.wrapping_mul(b),
                };
                self.set(env, op, vec![Value::Tensor(TensorValue::scalar_i32(r))])
            }
            "cmpi" => {
                let a = env[&op.operands[0]].scalar()?;
                let b = env[&op.operands[1]].scalar()?;
                let r = match op.attr_token("pred").unwrap() {
                    "eq" => a == b,
                    "ne" => a != b,
                    "lt" => a < b,
                    "le" => a <= b,
                    "gt" => a > b,
                    _ => a >= b,
                };
                self.set(env, op, vec![Value::Tensor(TensorValue::scalar_i1(r))])
            }
            "for" => {
                let lower = op.attr_int("lower").unwrap();
                let upper = op.attr_int("upper").unwrap();
                let step = op.attr_int("step").unwrap();
                let region = &op.regions[0];
                let mut carried: Vec<Value> =
                    op.operands.iter().map(|v| env[v].clone()).collect();
                let mut iv = lower;
                while iv < upper {
                    env.insert(region.args[0], Value::Tensor(TensorValue::scalar_i32(iv as i32)));
                    for (arg, val) in region.args[1..].iter().zip(&carried) {
                        env.insert(*arg, val.clone());
                    }
                    match self.eval_region(func, region, env)? {
                        Some(vals) => carried = vals,
                        None if carried.is_empty() => {}
                        None => return Err(Error::exec("loop body did not yield")),
                    }
                    iv += step;
                }
                self.set(env, op, carried)
            }
            "alloc" => {
                let ty = op.result_types[0].tensor().unwrap().clone();
                self.set(env, op, vec![Value::Tensor(TensorValue::zeros(ty))])
            }
            "yield" | "return" => Err(Error::exec("terminator evaluated out of context")),
            other => Err(Error::exec(format!("unknown core op '{}'", other))),
        }
    }

    fn offsets(&self, operands: &[ValueId], env: &HashMap<ValueId, Value>) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(operands.len());
        for o in operands {
            let v = env[o].scalar()?;
            if v < 0 {
                return Err(Error::exec(format!("negative offset {}", v)));
            }
            out.push(v as usize);
        }
        Ok(out)
    }

    // ---- cinm ----------------------------------------------------------

    fn eval_cinm(&mut self, op: &Op, env: &mut HashMap<ValueId, Value>) -> Result<()> {
        let results = eval_compute(
            &op.mnemonic,
            op,
            &op.operands
                .iter()
                .take(if op.attrs.contains_key("dst") {
                    op.operands.len() - 1
                } else {
                    op.operands.len()
                })
                .map(|o| env[o].tensor().cloned())
                .collect::<Result<Vec<_>>>()?,
        )?;
        if op.is("cinm", "gemm") || op.is("cinm", "gemv") {
            self.state.bump("gemm_evals", 1);
        }
        self.set(env, op, results.into_iter().map(Value::Tensor).collect())
    }

    // ---- cnm logical model ----------------------------------------------

    fn eval_cnm(
        &mut self,
        func: &Function,
        op: &Op,
        env: &mut HashMap<ValueId, Value>,
    ) -> Result<()> {
        match op.mnemonic.as_str() {
            "allocate" => {
                let dims = match &op.result_types[0] {
                    Type::Workgroup(d) => d.clone(),
                    _ => unreachable!(),
                };
                self.state.workgroups.push(dims);
                let id = self.state.workgroups.len() - 1;
                self.set(env, op, vec![Value::Workgroup(id)])
            }
            "alloc_buffer" => {
                let (item, level) = match &op.result_types[0] {
                    Type::Buffer { item, level } => (item.clone(), *level),
                    _ => unreachable!(),
                };
                let wg = match env[&op.operands[0]] {
                    Value::Workgroup(id) => id,
                    _ => return Err(Error::exec("expected workgroup")),
                };
                let wg_dims = self.state.workgroups[wg].clone();
                let nodes: usize = wg_dims[..level].iter().product();
                let per = item.element_count();
                self.state.buffers.push(CnmBuffer {
                    item,
                    wg_dims,
                    level,
                    instances: vec![vec![0; per]; nodes.max(1)],
                });
                let id = self.state.buffers.len() - 1;
                self.set(env, op, vec![Value::Buffer(id)])
            }
            "scatter" => {
                let host = env[&op.operands[0]].tensor()?.clone();
                let buf = self.buffer_id(op.operands[1], env)?;
                let map = crate::cnm::ScatterMap::from_attr(op.attr_list("map").unwrap())?;
                let (per, all_dims) = self.buffer_dims(buf);
                let total: usize = all_dims.iter().product::<usize>().max(1);
                let mut coords = vec![0usize; all_dims.len()];
                for i in 0..total {
                    let flat = map.eval(&coords);
                    if flat < 0 || flat as usize >= host.data.len() {
                        return Err(Error::exec("scatter map target out of range"));
                    }
                    self.state.buffers[buf].instances[i / per][i % per] =
                        host.data[flat as usize];
                    crate::cnm::advance(&mut coords, &all_dims);
                }
                Ok(())
            }
            "gather" => {
                let buf = self.buffer_id(op.operands[0], env)?;
                let out_ty = op.result_types[0].tensor().unwrap().clone();
                let map = crate::cnm::ScatterMap::from_attr(op.attr_list("map").unwrap())?;
                let (per, all_dims) = self.buffer_dims(buf);
                let total: usize = all_dims.iter().product::<usize>().max(1);
                let mut data = vec![0i32; out_ty.element_count()];
                let mut coords = vec![0usize; all_dims.len()];
                for i in 0..total {
                    let flat = map.eval(&coords);
                    if flat < 0 || flat as usize >= data.len() {
                        return Err(Error::exec("gather map target out of range"));
                    }
                    data[flat as usize] = self.state.buffers[buf].instances[i / per][i % per];
                    crate::cnm::advance(&mut coords, &all_dims);
                }
                self.set(env, op, vec![Value::Tensor(TensorValue::new(out_ty, data)?)])
            }
            "launch" => self.eval_launch(func, op, env),
            "wait" => Ok(()),
            other => Err(Error::exec(format!("unknown cnm op '{}'", other))),
        }
    }

    fn buffer_id(&self, v: ValueId, env: &HashMap<ValueId, Value>) -> Result<usize> {
        match env[&v] {
            Value::Buffer(id) => Ok(id),
            _ => Err(Error::exec("expected buffer")),
        }
    }

    /// (elements per instance, node dims ++ item dims) for a buffer.
    fn buffer_dims(&self, buf: usize) -> (usize, Vec<usize>) {
        let b = &self.state.buffers[buf];
        let per = b.item.element_count().max(1);
        let all: Vec<usize> =
            b.wg_dims[..b.level].iter().chain(b.item.shape.iter()).copied().collect();
        (per, all)
    }

    fn eval_launch(
        &mut self,
        func: &Function,
        op: &Op,
        env: &mut HashMap<ValueId, Value>,
    ) -> Result<()> {
        let wg = match env[&op.operands[0]] {
            Value::Workgroup(id) => id,
            _ => return Err(Error::exec("expected workgroup")),
        };
        let dims = self.state.workgroups[wg].clone();
        let ins = op.attr_int("ins").unwrap_or(0) as usize;
        let bufs: Vec<usize> = op.operands[1..]
            .iter()
            .map(|v| match env[v] {
                Value::Buffer(id) => Ok(id),
                _ => Err(Error::exec("expected buffer")),
            })
            .collect::<Result<Vec<_>>>()?;
        let buf_levels: Vec<usize> = op.operands[1..]
            .iter()
            .map(|v| match func.value_type(*v) {
                Type::Buffer { level, .. } => *level,
                _ => 0,
            })
            .collect();
        let region = &op.regions[0];
        let leaf_count: usize = dims.iter().product();

        let mut order: Vec<usize> = (0..leaf_count).collect();
        if self.state.cfg.reverse_leaves {
            order.reverse();
        }
        let strides = row_major_strides(&dims);
        for leaf in order {
            // Leaf coordinates from the flat index.
            let coords: Vec<usize> = strides.iter().zip(&dims).map(|(s, d)| leaf / s % d).collect();
            let mut leaf_env: HashMap<ValueId, Value> = HashMap::new();
            for ((i, buf), level) in bufs.iter().enumerate().zip(&buf_levels) {
                // Instance on this leaf's root path at the buffer's level.
                let node = if *level == 0 {
                    0
                } else {
                    let node_strides = row_major_strides(&dims[..*level]);
                    coords[..*level]
                        .iter()
                        .zip(&node_strides)
                        .map(|(c, s)| c * s)
                        .sum::<usize>()
                };
                let b = &self.state.buffers[*buf];
                let t = TensorValue::new(b.item.clone(), b.instances[node].clone())?;
                leaf_env.insert(region.args[i], Value::Tensor(t));
            }
            for (k, c) in coords.iter().enumerate() {
                leaf_env.insert(
                    region.args[bufs.len() + k],
                    Value::Tensor(TensorValue::scalar_i32(*c as i32)),
                );
            }
            let yielded = self.eval_region(func, region, &mut leaf_env)?;
            if let Some(vals) = yielded {
                for (v, buf) in vals.iter().zip(&bufs[ins..]) {
                    let t = v.tensor()?;
                    self.state.buffers[*buf].instances[leaf] = t.data.as_ref().clone();
                }
            }
        }
        self.state.tokens += 1;
        self.set(env, op, vec![Value::Token(self.state.tokens - 1)])
    }

    // ---- cim -------------------------------------------------------------

    fn eval_cim(&mut self, op: &Op, env: &mut HashMap<ValueId, Value>) -> Result<()> {
        match op.mnemonic.as_str() {
            "acquire" => {
                let free = self
                    .state
                    .cim_pool
                    .iter()
                    .position(|s| s.state == CimDeviceState::Free)
                    .ok_or_else(|| Error::resource("no free device"))?;
                self.state.cim_pool[free].state = CimDeviceState::Acquired;
                self.set(env, op, vec![Value::CimDevice(free)])
            }
            "execute" => {
                let dev = match env[&op.operands[0]] {
                    Value::CimDevice(d) => d,
                    _ => return Err(Error::exec("expected device")),
                };
                if self.state.cim_pool[dev].state == CimDeviceState::Free {
                    return Err(Error::exec("execute on a device that is not acquired"));
                }
                let a = env[&op.operands[1]].tensor()?.clone();
                let b = env[&op.operands[2]].tensor()?.clone();
                let out = match op.attr_token("kind").unwrap() {
                    "gemm" => semantics::gemm(&a, &b)?,
                    _ => semantics::gemv(&a, &b)?,
                };
                self.state.cim_pool[dev].state = CimDeviceState::Programmed;
                self.state.cim_futures.push(Some(out));
                let fut = self.state.cim_futures.len() - 1;
                self.state.bump("gemm_evals", 1);
                self.set(env, op, vec![Value::CimFuture(fut)])
            }
            "barrier" => {
                let fut = match env[&op.operands[1]] {
                    Value::CimFuture(f) => f,
                    _ => return Err(Error::exec("expected future")),
                };
                let t = self.state.cim_futures[fut]
                    .take()
                    .ok_or_else(|| Error::exec("barrier on an already-consumed future"))?;
                self.set(env, op, vec![Value::Tensor(t)])
            }
            "release" => {
                let dev = match env[&op.operands[0]] {
                    Value::CimDevice(d) => d,
                    _ => return Err(Error::exec("expected device")),
                };
                if self.state.cim_pool[dev].state == CimDeviceState::Free {
                    return Err(Error::exec("release of a device that is not acquired"));
                }
                self.state.cim_pool[dev].state = CimDeviceState::Free;
                Ok(())
            }
            other => Err(Error::exec(format!("unknown cim op '{}'", other))),
        }
    }

    // ---- memristor --------------------------------------------------------

    fn eval_memristor(&mut self, op: &Op, env: &mut HashMap<ValueId, Value>) -> Result<()> {
        match op.mnemonic.as_str() {
            "checkout" => {
                let pool = op.attr_int("pool").unwrap() as usize;
                if self.state.crossbars.is_empty() {
                    self.state.crossbars = vec![Crossbar::default(); pool];
                }
                let free = self
                    .state
                    .crossbars
                    .iter()
                    .position(|c| !c.in_use)
                    .ok_or_else(|| Error::resource("pool exhausted: no free crossbar device"))?;
                self.state.crossbars[free].in_use = true;
                self.set(env, op, vec![Value::MemDevice(free)])
            }
            "checkin" => {
                let dev = self.mem_dev(op.operands[0], env)?;
                if !self.state.crossbars[dev].in_use {
                    return Err(Error::exec("checkin of a device that is not checked out"));
                }
                self.state.crossbars[dev].in_use = false;
                Ok(())
            }
            "write_to_crossbar" => {
                let dev = self.mem_dev(op.operands[0], env)?;
                let tile = env[&op.operands[1]].tensor()?.clone();
                let (r, c) = match tile.ty.shape.as_slice() {
                    [r, c] => (*r, *c),
                    [r] => (*r, 1),
                    _ => return Err(Error::exec("crossbar tile must be rank 1 or 2")),
                };
                self.state.crossbars[dev].programmed = Some((tile.data.as_ref().clone(), r, c));
                self.state.bump("crossbar_writes", 1);
                self.state.bump(&format!("crossbar_writes.dev{}", dev), 1);
                Ok(())
            }
            "gemv_read" | "gemm_read" => {
                let dev = self.mem_dev(op.operands[0], env)?;
                let x = env[&op.operands[1]].tensor()?.clone();
                let (w, wr, wc) = self.state.crossbars[dev].programmed.clone().ok_or_else(
                    || Error::exec("read before write: crossbar device has no programmed tile"),
                )?;
                let out = if op.mnemonic == "gemv_read" {
                    // x^T . W across the wordlines.
                    if x.data.len() != wr {
                        return Err(Error::exec("gemv_read input length mismatch"));
                    }
                    let mut o = vec![0i32; wc];
                    for i in 0..wr {
                        let xv = x.data[i];
                        for j in 0..wc {
                            o[j] = o[j].wrapping_add(xv.wrapping_mul(w[i * wc + j]));
                        }
                    }
                    self.state.bump("crossbar_mvms", 1);
                    self.state.bump(&format!("crossbar_mvms.dev{}", dev), 1);
                    TensorValue::from_vec_i32(vec![wc], o)?
                } else {
                    let (n, k) = match x.ty.shape.as_slice() {
                        [n, k] => (*n, *k),
                        _ => return Err(Error::exec("gemm_read input must be rank 2")),
                    };
                    if k != wr {
                        return Err(Error::exec("gemm_read input width mismatch"));
                    }
                    let mut o = vec![0i32; n * wc];
                    for row in 0..n {
                        for i in 0..k {
                            let xv = x.data[row * k + i];
                            if xv == 0 {
                                continue;
                            }
                            for j in 0..wc {
                                o[row * wc + j] =
                                    o[row * wc + j].wrapping_add(xv.wrapping_mul(w[i * wc + j]));
                            }
                        }
                    }
                    self.state.bump("crossbar_mvms", n as u64);
                    self.state.bump(&format!("crossbar_mvms.dev{}", dev), n as u64);
                    TensorValue::from_vec_i32(vec![n, wc], o)?
                };
                self.state.bump("crossbar_read_events", 1);
                self.state.bump(&format!("crossbar_read_events.dev{}", dev), 1);
                let out = reshape_to(out, op.result_types[0].tensor().unwrap())?;
                self.set(env, op, vec![Value::Tensor(out)])
            }
            "copy_tile" => {
                let host = env[&op.operands[0]].tensor()?.clone();
                let offs = self.offsets(&op.operands[1..], env)?;
                let sizes: Vec<usize> =
                    op.attr_list("sizes").unwrap().iter().map(|s| *s as usize).collect();
                let tile = extract_slice(&host, &offs, &sizes)?;
                self.state.bump("host_to_device_bytes", (tile.data.len() * 4) as u64);
                self.set(env, op, vec![Value::Tensor(tile)])
            }
            "store_tile" => {
                let host = env[&op.operands[0]].tensor()?.clone();
                let tile = env[&op.operands[1]].tensor()?.clone();
                let offs = self.offsets(&op.operands[2..], env)?;
                self.state.bump("device_to_host_bytes", (tile.data.len() * 4) as u64);
                let out = insert_slice(&host, &tile, &offs)?;
                self.set(env, op, vec![Value::Tensor(out)])
            }
            other => Err(Error::exec(format!("unknown memristor op '{}'", other))),
        }
    }

    fn mem_dev(&self, v: ValueId, env: &HashMap<ValueId, Value>) -> Result<usize> {
        match env[&v] {
            Value::MemDevice(d) => Ok(d),
            _ => Err(Error::exec("expected memristor device")),
        }
    }

    // ---- upmem -------------------------------------------------------------

    fn eval_upmem(
        &mut self,
        func: &Function,
        op: &Op,
        env: &mut HashMap<ValueId, Value>,
    ) -> Result<()> {
        match op.mnemonic.as_str() {
            "alloc_dpus" => {
                let (ranks, dpus, tasklets) = match op.result_types[0] {
                    Type::DpuGrid { ranks, dpus, tasklets } => (ranks, dpus, tasklets),
                    _ => unreachable!(),
                };
                let spec = &self.state.cfg.upmem;
                if ranks > spec.ranks || dpus > spec.dpus_per_rank || tasklets > spec.tasklets_per_dpu
                {
                    return Err(Error::resource(format!(
                        "grid {}x{}x{} exceeds the device ({} ranks, {} DPUs/rank, {} tasklets)",
                        ranks, dpus, tasklets, spec.ranks, spec.dpus_per_rank, spec.tasklets_per_dpu
                    )));
                }
                self.state.grids.push(GridState {
                    ranks,
                    dpus,
                    tasklets,
                    mram: (0..ranks * dpus).map(|_| DpuMem { words: vec![] }).collect(),
                });
                let id = self.state.grids.len() - 1;
                self.set(env, op, vec![Value::Grid(id)])
            }
            "copy_to_mram" => {
                let grid = self.grid_id(op.operands[0], env)?;
                let host = env[&op.operands[1]].tensor()?.clone();
                self.mram_copy(grid, op, Some(&host), None)?;
                Ok(())
            }
            "copy_from_mram" => {
                let grid = self.grid_id(op.operands[0], env)?;
                let out_ty = op.result_types[0].tensor().unwrap().clone();
                let mut data = vec![0i32; out_ty.element_count()];
                self.mram_copy(grid, op, None, Some(&mut data))?;
                self.set(env, op, vec![Value::Tensor(TensorValue::new(out_ty, data)?)])
            }
            "launch_kernel" => {
                let grid = self.grid_id(op.operands[0], env)?;
                self.state.bump("launches", 1);
                self.run_kernel(func, grid, &op.regions[0])
            }
            "tasklet_id" => {
                let k = self.state.kctx.ok_or_else(|| Error::exec("tasklet_id outside kernel"))?;
                self.set(env, op, vec![Value::Tensor(TensorValue::scalar_i32(k.tasklet as i32))])
            }
            "wram_alloc" => {
                let ty = op.result_types[0].tensor().unwrap().clone();
                self.set(env, op, vec![Value::Tensor(TensorValue::zeros(ty))])
            }
            "mram_read" => {
                let k = self.state.kctx.ok_or_else(|| Error::exec("mram_read outside kernel"))?;
                let off = env[&op.operands[0]].scalar()?;
                let bytes = op.attr_int("bytes").unwrap() as usize;
                self.check_dma(off, bytes)?;
                let ty = op.result_types[0].tensor().unwrap().clone();
                let words = bytes / 4;
                let start = off as usize / 4;
                let mem = &mut self.state.grids[k.grid].mram[k.dpu_index].words;
                if mem.len() < start + words {
                    mem.resize(start + words, 0);
                }
                let data = mem[start..start + words].to_vec();
                self.count_dma(op, bytes);
                self.set(env, op, vec![Value::Tensor(TensorValue::new(ty, data)?)])
            }
            "mram_write" => {
                let k = self.state.kctx.ok_or_else(|| Error::exec("mram_write outside kernel"))?;
                let val = env[&op.operands[0]].tensor()?.clone();
                let off = env[&op.operands[1]].scalar()?;
                let bytes = op.attr_int("bytes").unwrap() as usize;
                self.check_dma(off, bytes)?;
                let start = off as usize / 4;
                let words = bytes / 4;
                let mem = &mut self.state.grids[k.grid].mram[k.dpu_index].words;
                if mem.len() < start + words {
                    mem.resize(start + words, 0);
                }
                mem[start..start + words].copy_from_slice(&val.data[..words]);
                self.count_dma(op, bytes);
                Ok(())
            }
            "barrier_wait" => Err(Error::exec("barrier_wait evaluated out of phase context")),
            "kernel_call" => {
                let callee = op.attr_token("callee").unwrap().to_string();
                let args: Vec<TensorValue> = op
                    .operands
                    .iter()
                    .map(|o| env[o].tensor().cloned())
                    .collect::<Result<Vec<_>>>()?;
                if callee == "gemm" || callee == "gemv" {
                    self.state.bump("gemm_evals", 1);
                }
                let results = eval_compute(&callee, op, &args)?;
                self.set(env, op, results.into_iter().map(Value::Tensor).collect())
            }
            other => Err(Error::exec(format!("unknown upmem op '{}'", other))),
        }
    }

    fn grid_id(&self, v: ValueId, env: &HashMap<ValueId, Value>) -> Result<usize> {
        match env[&v] {
            Value::Grid(g) => Ok(g),
            _ => Err(Error::exec("expected DPU grid")),
        }
    }

    fn check_dma(&self, off: i32, bytes: usize) -> Result<()> {
        if off < 0 || off % 8 != 0 {
            return Err(Error::exec(format!("misaligned MRAM offset {}", off)));
        }
        if bytes % 8 != 0 {
            return Err(Error::exec(format!(
                "misaligned transfer: {} bytes is not a multiple of 8",
                bytes
            )));
        }
        if off as usize + bytes > self.state.cfg.upmem.mram_bytes {
            return Err(Error::exec(format!(
                "MRAM access at {}+{} out of bounds",
                off, bytes
            )));
        }
        Ok(())
    }

    fn count_dma(&mut self, op: &Op, bytes: usize) {
        self.state.bump("mram_wram_bytes", bytes as u64);
        if let Some(tag) = op.attr_str("tag") {
            let key = format!("mram_wram_bytes.{}", tag);
            self.state.bump(&key, bytes as u64);
        }
    }

    /// Host<->MRAM copies driven by the buffer geometry attrs: `wg` dims,
    /// buffer `level`, per-node `chunk` shape, affine `map`, `base` offset.
    /// Level-0 buffers are replicated into every DPU of the grid.
    fn mram_copy(
        &mut self,
        grid: usize,
        op: &Op,
        host_in: Option<&TensorValue>,
        host_out: Option<&mut Vec<i32>>,
    ) -> Result<()> {
        let base = op.attr_int("base").unwrap() as usize;
        let wg: Vec<usize> = op.attr_list("wg").unwrap().iter().map(|d| *d as usize).collect();
        let level = op.attr_int("level").unwrap() as usize;
        let chunk: Vec<usize> =
            op.attr_list("chunk").unwrap().iter().map(|d| *d as usize).collect();
        let map = crate::cnm::ScatterMap::from_attr(op.attr_list("map").unwrap())?;
        let per: usize = chunk.iter().product::<usize>().max(1);
        let chunk_bytes = align8(per * 4);
        let g = &self.state.grids[grid];
        let (_ranks, dpus, tasklets) = (g.ranks, g.dpus, g.tasklets);
        let n_dpus = g.ranks * dpus;

        if level == 0 {
            // Broadcast: one instance, replicated per DPU.
            let host = host_in.ok_or_else(|| Error::exec("broadcast buffers are read-only"))?;
            let mut coords = vec![0usize; chunk.len()];
            let mut content = vec![0i32; per];
            for e in 0..per {
                let flat = map.eval(&coords);
                if flat < 0 || flat as usize >= host.data.len() {
                    return Err(Error::exec("MRAM copy map target out of range"));
                }
                content[e] = host.data[flat as usize];
                crate::cnm::advance(&mut coords, &chunk);
            }
            for d in 0..n_dpus {
                let mem = &mut self.state.grids[grid].mram[d].words;
                let start = base / 4;
                if mem.len() < start + per {
                    mem.resize(start + per, 0);
                }
                mem[start..start + per].copy_from_slice(&content);
            }
            self.state.bump("host_to_mram_bytes", (n_dpus * chunk_bytes) as u64);
            return Ok(());
        }

        // Leaf buffers: one chunk per (rank, dpu, tasklet) leaf, laid out at
        // base + tasklet * aligned(chunk bytes) in the owning DPU's MRAM.
        if level != wg.len() {
            return Err(Error::exec("MRAM copies support root and leaf buffers only"));
        }
        let leaf_count: usize = wg.iter().product();
        let (gr, gd, gt) = grid_shape(&wg)?;
        if gr * gd > n_dpus || gt > tasklets {
            return Err(Error::exec("workgroup does not fit the allocated grid"));
        }
        let wg_strides = row_major_strides(&wg);
        let host_len =
            host_in.map(|h| h.data.len()).or_else(|| host_out.as_ref().map(|h| h.len())).unwrap();
        let mut host_out = host_out;
        for leaf in 0..leaf_count {
            let coords: Vec<usize> =
                wg_strides.iter().zip(&wg).map(|(s, d)| leaf / s % d).collect();
            // Right-aligned (rank, dpu, tasklet) mapping.
            let mut rdt = [0usize; 3];
            let pad = 3 - wg.len();
            for (i, c) in coords.iter().enumerate() {
                rdt[pad + i] = *c;
            }
            let dpu_index = rdt[0] * dpus + rdt[1];
            let tasklet = rdt[2];
            let start = (base + tasklet * chunk_bytes) / 4;
            let mut ecoords = vec![0usize; chunk.len()];
            for e in 0..per {
                let mut all = coords.clone();
                all.extend_from_slice(&ecoords);
                let flat = map.eval(&all);
                if flat < 0 || flat as usize >= host_len {
                    return Err(Error::exec("MRAM copy map target out of range"));
                }
                let mem = &mut self.state.grids[grid].mram[dpu_index].words;
                if mem.len() < start + per {
                    mem.resize(start + per, 0);
                }
                match (&host_in, &mut host_out) {
                    (Some(h), _) => mem[start + e] = h.data[flat as usize],
                    (None, Some(out)) => out[flat as usize] = mem[start + e],
                    _ => unreachable!(),
                }
                crate::cnm::advance(&mut ecoords, &chunk);
            }
        }
        let key = if host_in.is_some() { "host_to_mram_bytes" } else { "mram_to_host_bytes" };
        self.state.bump(key, (leaf_count * chunk_bytes) as u64);
        Ok(())
    }

    /// Executes a kernel region once per (dpu, tasklet), splitting at
    /// top-level barrier_wait ops into phases; per-tasklet state persists
    /// across phases, and the tasklet order is configurable to let tests
    /// assert order independence.
    fn run_kernel(&mut self, func: &Function, grid: usize, region: &Region) -> Result<()> {
        let g = &self.state.grids[grid];
        let (n_dpus, tasklets) = (g.ranks * g.dpus, g.tasklets);
        // Split into phases at barriers.
        let mut phases: Vec<Vec<&Op>> = vec![vec![]];
        let mut n_barriers = 0u64;
        for op in &region.ops {
            if op.is("upmem", "barrier_wait") {
                phases.push(vec![]);
                n_barriers += 1;
            } else {
                phases.last_mut().unwrap().push(op);
            }
        }
        for dpu_index in 0..n_dpus {
            let mut envs: Vec<HashMap<ValueId, Value>> =
                (0..tasklets).map(|_| HashMap::new()).collect();
            for phase in &phases {
                let mut order: Vec<usize> = (0..tasklets).collect();
                if self.state.cfg.reverse_tasklets {
                    order.reverse();
                }
                for t in order {
                    self.state.kctx = Some(KernelCtx { grid, dpu_index, tasklet: t });
                    for op in phase {
                        self.eval_op(func, op, &mut envs[t])?;
                    }
                    self.state.kctx = None;
                }
            }
            self.state.bump("barriers", n_barriers);
        }
        Ok(())
    }
}

/// Dispatches a compute mnemonic (cinm op or device-library callee) onto the
/// shared semantics functions.
pub fn eval_compute(mnemonic: &str, op: &Op, args: &[TensorValue]) -> Result<Vec<TensorValue>> {
    let one = |t: TensorValue| -> Result<Vec<TensorValue>> { Ok(vec![t]) };
    match mnemonic {
        "add" => one(semantics::elementwise_add(&args[0], &args[1])?),
        "sub" => one(semantics::elementwise_sub(&args[0], &args[1])?),
        "gemm" => one(semantics::gemm(&args[0], &args[1])?),
        "gemv" => one(semantics::gemv(&args[0], &args[1])?),
        "min" => one(semantics::reduce(ReduceKind::Min, &args[0])?),
        "max" => one(semantics::reduce(ReduceKind::Max, &args[0])?),
        "logicop" => {
            let kind = LogicKind::parse(op.attr_token("op").unwrap())?;
            one(semantics::logicop(kind, &args[0], args.get(1))?)
        }
        "transpose" => one(semantics::transpose(&args[0])?),
        "histogram" => {
            let bins = op.attr_int("bins").unwrap() as usize;
            one(semantics::histogram(bins, &args[0])?)
        }
        "majority" => one(semantics::majority(&args[0])?),
        "topk" => {
            let k = op.attr_int("k").unwrap() as usize;
            let (v, i) = semantics::topk(k, &args[0])?;
            Ok(vec![v, i])
        }
        "simSearch" => {
            let metric = Metric::parse(op.attr_token("metric").unwrap())?;
            let count = op.attr_int("count").unwrap() as usize;
            let (s, i) = semantics::sim_search(metric, &args[0], &args[1], count)?;
            Ok(vec![s, i])
        }
        "mergePartial" => {
            let kind = MergeKind::parse(op.attr_token("kind").unwrap())?;
            let axis = op.attr_int("axis").unwrap_or(0) as usize;
            one(semantics::merge_partial(kind, axis, &args[0], &args[1])?)
        }
        "popcount" => one(semantics::popcount(&args[0])?),
        "reduce" => {
            let kind = ReduceKind::parse(op.attr_token("op").unwrap())?;
            one(semantics::reduce(kind, &args[0])?)
        }
        "scan" => {
            let kind = ReduceKind::parse(op.attr_token("op").unwrap())?;
            one(semantics::scan(kind, &args[0])?)
        }
        "conv2d" => one(semantics::conv2d(&args[0], &args[1])?),
        "contract" => {
            let spec = op.attr_str("spec").unwrap();
            one(semantics::einsum2(spec, &args[0], &args[1])?)
        }
        other => Err(Error::exec(format!("unknown compute op '{}'", other))),
    }
}

fn reshape_to(t: TensorValue, ty: &TensorType) -> Result<TensorValue> {
    if t.ty.element_count() != ty.element_count() {
        return Err(Error::exec("result element count mismatch"));
    }
    Ok(TensorValue { ty: ty.clone(), data: t.data })
}

pub fn extract_slice(src: &TensorValue, offs: &[usize], sizes: &[usize]) -> Result<TensorValue> {
    let rank = src.ty.rank();
    if offs.len() != rank || sizes.len() != rank {
        return Err(Error::exec("slice rank mismatch"));
    }
    for ((o, s), d) in offs.iter().zip(sizes).zip(&src.ty.shape) {
        if o + s > *d {
            return Err(Error::exec(format!(
                "slice [{}..{}] out of bounds for extent {}",
                o,
                o + s,
                d
            )));
        }
    }
    let out_ty = TensorType::new(sizes.to_vec(), src.ty.elem);
    let mut data = Vec::with_capacity(out_ty.element_count());
    let strides = src.strides();
    if rank == 0 {
        return Ok(src.clone());
    }
    let mut coords = vec![0usize; rank];
    let total = out_ty.element_count();
    for _ in 0..total {
        let mut flat = 0;
        for i in 0..rank {
            flat += (offs[i] + coords[i]) * strides[i];
        }
        data.push(src.data[flat]);
        crate::cnm::advance(&mut coords, sizes);
    }
    TensorValue::new(out_ty, data)
}

pub fn insert_slice(dst: &TensorValue, val: &TensorValue, offs: &[usize]) -> Result<TensorValue> {
    let rank = dst.ty.rank();
    if offs.len() != rank || val.ty.rank() != rank {
        return Err(Error::exec("insert rank mismatch"));
    }
    for ((o, s), d) in offs.iter().zip(&val.ty.shape).zip(&dst.ty.shape) {
        if o + s > *d {
            return Err(Error::exec("insert out of bounds"));
        }
    }
    let mut data = dst.data.as_ref().clone();
    let strides = dst.strides();
    if rank == 0 {
        return Ok(val.clone());
    }
    let mut coords = vec![0usize; rank];
    for v in val.data.iter() {
        let mut flat = 0;
        for i in 0..rank {
            flat += (offs[i] + coords[i]) * strides[i];
        }
        data[flat] = *v;
        crate::cnm::advance(&mut coords, &val.ty.shape);
    }
    Ok(TensorValue { ty: dst.ty.clone(), data: Rc::new(data) })
}

pub fn permute(src: &TensorValue, perm: &[usize]) -> Result<TensorValue> {
    let rank = src.ty.rank();
    if perm.len() != rank {
        return Err(Error::exec("permutation rank mismatch"));
    }
    let out_shape: Vec<usize> = perm.iter().map(|p| src.ty.shape[*p]).collect();
    let out_ty = TensorType::new(out_shape.clone(), src.ty.elem);
    let src_strides = src.strides();
    let mut data = vec![0i32; src.data.len()];
    let mut coords = vec![0usize; rank];
    for out_flat in 0..src.data.len().max(1) {
        if out_flat >= src.data.len() {
            break;
        }
        let mut src_flat = 0;
        for (i, p) in perm.iter().enumerate() {
            src_flat += coords[i] * src_strides[*p];
        }
        data[out_flat] = src.data[src_flat];
        crate::cnm::advance(&mut coords, &out_shape);
    }
    TensorValue::new(out_ty, data)
}
