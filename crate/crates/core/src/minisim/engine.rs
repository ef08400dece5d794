use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::bugs::BugId;
use super::memory::{exec, exec_mut, logical, EventKind, MirroredArray, Runtime};
use super::units::{self, Unit, THERMO_OUTPUT};
use super::{
    AccumulationOrder, BackendConfig, ErrorKind, ExecutionReport, Probe, RunOptions, RunStatus,
    SimError, ThermoTable,
};
use crate::script::{Script, ScriptLine};

pub const MAX_ATOMS: usize = 4096;
const MORSE_ALPHA: f64 = 2.0;
const BIN_EVERY: u64 = 10;
const MAX_BINS: usize = 32;
const TRUNCATED_COPY_ATOMS: usize = 64;

enum Halt {
    Error(SimError),
    Timeout,
}

type Res<T = ()> = Result<T, Halt>;

#[derive(Clone, Copy)]
struct Lattice {
    basis: &'static [[f64; 3]],
    a: f64,
}

const SC: &[[f64; 3]] = &[[0.0, 0.0, 0.0]];
const BCC: &[[f64; 3]] = &[[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]];
const FCC: &[[f64; 3]] = &[
    [0.0, 0.0, 0.0],
    [0.5, 0.5, 0.0],
    [0.5, 0.0, 0.5],
    [0.0, 0.5, 0.5],
];

#[derive(Clone, Copy)]
enum Shape {
    Block { lo: [f64; 3], hi: [f64; 3] },
    Sphere { c: [f64; 3], r: f64 },
}

impl Shape {
    fn contains(&self, p: [f64; 3], dim: usize) -> bool {
        match *self {
            Shape::Block { lo, hi } => (0..dim).all(|d| p[d] >= lo[d] && p[d] < hi[d]),
            Shape::Sphere { c, r } => (0..dim).map(|d| (p[d] - c[d]).powi(2)).sum::<f64>() <= r * r,
        }
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match *self {
            Shape::Block { lo, hi } => (lo, hi),
            Shape::Sphere { c, r } => ([c[0] - r, c[1] - r, c[2] - r], [c[0] + r, c[1] + r, c[2] + r]),
        }
    }
}

/// Union of shapes.
#[derive(Clone)]
struct Region(Vec<Shape>);

impl Region {
    fn contains(&self, p: [f64; 3], dim: usize) -> bool {
        self.0.iter().any(|s| s.contains(p, dim))
    }

    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in &self.0 {
            let (l, h) = s.bounds();
            for d in 0..3 {
                lo[d] = lo[d].min(l[d]);
                hi[d] = hi[d].max(h[d]);
            }
        }
        (lo, hi)
    }
}

#[derive(Clone, Copy)]
struct Geom {
    lo: [f64; 3],
    hi: [f64; 3],
    periodic: [bool; 3],
    dim: usize,
}

impl Geom {
    fn len(&self, d: usize) -> f64 {
        self.hi[d] - self.lo[d]
    }

    fn volume(&self) -> f64 {
        (0..self.dim).map(|d| self.len(d)).product()
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        (0..self.dim).all(|d| p[d] >= self.lo[d] && p[d] < self.hi[d])
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PairKind {
    Soft,
    Harmonic,
    Gauss,
    Morse,
}

#[derive(Clone, Copy)]
struct PairStyle {
    kind: PairKind,
    rc: f64,
}

impl PairStyle {
    fn force_unit(&self) -> Unit {
        match self.kind {
            PairKind::Soft => "k:force_soft",
            PairKind::Harmonic => "k:force_harmonic",
            PairKind::Gauss => "k:force_gauss",
            PairKind::Morse => "k:force_morse",
        }
    }

    fn energy_unit(&self) -> Unit {
        match self.kind {
            PairKind::Soft => "k:pe_soft",
            PairKind::Harmonic => "k:pe_harmonic",
            PairKind::Gauss => "k:pe_gauss",
            PairKind::Morse => "k:pe_morse",
        }
    }

    /// Pair energy and `-dE/dr / r` at separation `r`.
    fn eval(&self, r: f64, c1: f64, c2: f64) -> (f64, f64) {
        match self.kind {
            PairKind::Soft => {
                if r >= c2 {
                    (0.0, 0.0)
                } else {
                    (0.5 * c1 * (c2 - r).powi(2), c1 * (c2 - r) / r)
                }
            }
            PairKind::Harmonic => (0.5 * c1 * (r - c2).powi(2), c1 * (c2 - r) / r),
            PairKind::Gauss => {
                let e = (-c2 * r * r).exp();
                (-c1 * e, -2.0 * c1 * c2 * e)
            }
            PairKind::Morse => {
                let e1 = (-MORSE_ALPHA * (r - c2)).exp();
                let energy = c1 * (e1 * e1 - 2.0 * e1);
                let de = c1 * (-2.0 * MORSE_ALPHA * e1 * e1 + 2.0 * MORSE_ALPHA * e1);
                (energy, -de / r)
            }
        }
    }
}

#[derive(Clone)]
enum FixStyle {
    Nve,
    Langevin {
        ts: f64,
        te: f64,
        damp: f64,
        seed: u64,
        target: MirroredArray,
    },
    Berendsen {
        ts: f64,
        te: f64,
        damp: f64,
    },
    Viscous(f64),
    SetForce([f64; 3]),
    Momentum(u64),
}

struct Fix {
    id: String,
    styles: Vec<FixStyle>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Column {
    Step,
    Temp,
    Pe,
    Ke,
    Etotal,
    Press,
    Vol,
}

impl Column {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "step" => Column::Step,
            "temp" => Column::Temp,
            "pe" => Column::Pe,
            "ke" => Column::Ke,
            "etotal" => Column::Etotal,
            "press" => Column::Press,
            "vol" => Column::Vol,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Column::Step => "step",
            Column::Temp => "temp",
            Column::Pe => "pe",
            Column::Ke => "ke",
            Column::Etotal => "etotal",
            Column::Press => "press",
            Column::Vol => "vol",
        }
    }
}

struct Arrays {
    x: MirroredArray,
    v: MirroredArray,
    f: MirroredArray,
    typ: MirroredArray,
    q: MirroredArray,
    mass: MirroredArray,
    coeff: MirroredArray,
    /// `[kB, dt]`
    consts: MirroredArray,
}

struct PairOut {
    f: Vec<f64>,
    e: Vec<f64>,
    w: Vec<f64>,
}

fn atom_mass(mass: &[f64], t: f64) -> f64 {
    mass.get(t.max(0.0) as usize).copied().unwrap_or(1.0)
}

fn weighted(vals: &[f64]) -> f64 {
    vals.iter()
        .enumerate()
        .map(|(i, v)| (1 + i % 7) as f64 * v.abs())
        .sum()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in [0, 1), a pure function of its arguments.
fn noise(seed: u64, step: u64, atom: usize, d: usize) -> f64 {
    let h = splitmix(splitmix(splitmix(seed) ^ step) ^ ((atom as u64) << 2 | d as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn pair_compute(
    g: &Geom,
    x: &[f64],
    typ: &[f64],
    coeff: &[f64],
    nt: usize,
    styles: &[PairStyle],
) -> PairOut {
    let n = typ.len();
    let mut out = PairOut {
        f: vec![0.0; 3 * n],
        e: vec![0.0; n],
        w: vec![0.0; n],
    };
    let tidx = |t: f64| (t.max(0.0) as usize).min(nt);
    for i in 0..n {
        let ti = tidx(typ[i]);
        for j in 0..n {
            if i == j {
                continue;
            }
            let mut d = [0.0; 3];
            let mut r2 = 0.0;
            for k in 0..g.dim {
                let mut dk = x[3 * i + k] - x[3 * j + k];
                if g.periodic[k] {
                    let l = g.len(k);
                    dk -= l * (dk / l).round();
                }
                d[k] = dk;
                r2 += dk * dk;
            }
            let r = r2.sqrt();
            if r < 1e-12 {
                continue;
            }
            let base = (ti * (nt + 1) + tidx(typ[j])) * 2;
            let (c1, c2) = (coeff[base], coeff[base + 1]);
            for s in styles {
                if r >= s.rc {
                    continue;
                }
                let (e, fr) = s.eval(r, c1, c2);
                for k in 0..g.dim {
                    out.f[3 * i + k] += fr * d[k];
                }
                out.e[i] += 0.5 * e;
                out.w[i] += 0.5 * fr * r2;
            }
        }
    }
    out
}

fn unit_of(name: &str) -> Unit {
    units::unit(name).unwrap_or("input")
}

pub(super) struct Sim<'a> {
    cfg: &'a BackendConfig,
    opts: &'a RunOptions,
    dev: bool,
    rt: Runtime,
    covered: BTreeSet<Unit>,
    first_hits: Vec<Unit>,
    probes: Vec<Probe>,
    thermo: ThermoTable,
    entered_dynamics: bool,
    work: u64,
    deadline: Option<Instant>,
    step: u64,
    run_start: u64,
    run_len: u64,
    dt_explicit: bool,
    dim: usize,
    periodic: [bool; 3],
    lattice: Option<Lattice>,
    regions: BTreeMap<String, Region>,
    geom: Option<Geom>,
    ntypes: usize,
    pairs: Vec<PairStyle>,
    fixes: Vec<Fix>,
    thermo_every: u64,
    columns: Vec<Column>,
    cached_virial: f64,
    last_row_step: Option<u64>,
    a: Arrays,
}

impl<'a> Sim<'a> {
    pub(super) fn new(cfg: &'a BackendConfig, opts: &'a RunOptions) -> Self {
        let mut rt = Runtime::new(cfg.backend);
        let mut consts = MirroredArray::new("consts");
        rt.resize(&mut consts, 2);
        consts.host.copy_from_slice(&[1.0, 0.005]);
        if rt.is_device() {
            consts.device.copy_from_slice(&[1.0, 0.005]);
        }
        Self {
            cfg,
            opts,
            dev: rt.is_device(),
            rt,
            covered: BTreeSet::new(),
            first_hits: Vec::new(),
            probes: Vec::new(),
            thermo: ThermoTable::default(),
            entered_dynamics: false,
            work: 0,
            deadline: opts.timeout.map(|t| Instant::now() + t),
            step: 0,
            run_start: 0,
            run_len: 0,
            dt_explicit: false,
            dim: 3,
            periodic: [true; 3],
            lattice: None,
            regions: BTreeMap::new(),
            geom: None,
            ntypes: 0,
            pairs: Vec::new(),
            fixes: Vec::new(),
            thermo_every: 0,
            columns: vec![
                Column::Step,
                Column::Temp,
                Column::Pe,
                Column::Ke,
                Column::Etotal,
                Column::Press,
            ],
            cached_virial: 0.0,
            last_row_step: None,
            a: Arrays {
                x: MirroredArray::new("x"),
                v: MirroredArray::new("v"),
                f: MirroredArray::new("f"),
                typ: MirroredArray::new("type"),
                q: MirroredArray::new("q"),
                mass: MirroredArray::new("mass"),
                coeff: MirroredArray::new("pair_coeff"),
                consts,
            },
        }
    }

    pub(super) fn execute(mut self, script: &Script) -> ExecutionReport {
        let mut outcome = Ok(());
        for line in script.lines() {
            outcome = self.check_clock().and_then(|_| self.command(line));
            if outcome.is_err() {
                break;
            }
        }
        let (status, error) = match outcome {
            Ok(()) => {
                self.teardown();
                (RunStatus::Completed, None)
            }
            Err(Halt::Timeout) => (RunStatus::TimedOut, None),
            Err(Halt::Error(e)) => (RunStatus::Failed, Some(e)),
        };
        let mut thermo = std::mem::take(&mut self.thermo);
        if thermo.columns.is_empty() {
            thermo.columns = self.columns.iter().map(|c| c.name().to_string()).collect();
        }
        ExecutionReport {
            status,
            error,
            thermo,
            events: self.rt.events,
            covered: self.covered,
            first_hits: self.first_hits,
            probes: self.probes,
            entered_dynamics: self.entered_dynamics,
            sync_violations: self.rt.sync_violations,
            work: self.work,
        }
    }

    fn teardown(&mut self) {
        let a = &mut self.a;
        for arr in [
            &mut a.x,
            &mut a.v,
            &mut a.f,
            &mut a.typ,
            &mut a.q,
            &mut a.mass,
            &mut a.coeff,
            &mut a.consts,
        ] {
            self.rt.free(arr);
        }
        for fix in &mut self.fixes {
            for s in &mut fix.styles {
                if let FixStyle::Langevin { target, .. } = s {
                    self.rt.free(target);
                }
            }
        }
    }

    // ---- helpers ----

    fn bug(&self, id: u8) -> bool {
        self.dev && self.cfg.bugs.contains(&BugId(id))
    }

    fn fail(&self, kind: ErrorKind, unit: &str, message: impl Into<String>) -> Halt {
        Halt::Error(SimError {
            kind,
            message: message.into(),
            unit: unit.to_string(),
            step: self.step,
        })
    }

    fn check_clock(&self) -> Res {
        if let Some(d) = self.deadline {
            if Instant::now() >= d {
                return Err(Halt::Timeout);
            }
        }
        if let Some(b) = self.opts.work_budget {
            if self.work > b {
                return Err(Halt::Timeout);
            }
        }
        Ok(())
    }

    fn enter(&mut self, unit: Unit) -> Res {
        if self.opts.stubs.contains(unit) {
            return Err(self.fail(
                ErrorKind::StubReached,
                unit,
                format!("{unit} is not part of the extracted subsystem"),
            ));
        }
        if self.covered.insert(unit) {
            self.first_hits.push(unit);
        }
        Ok(())
    }

    fn probe(&mut self, unit: Unit, scalar: f64) {
        let d = self.dev;
        let a = &self.a;
        let mut tables =
            weighted(logical(d, &a.mass)) + weighted(logical(d, &a.coeff)) + weighted(logical(d, &a.consts));
        for fix in &self.fixes {
            for s in &fix.styles {
                if let FixStyle::Langevin { target, .. } = s {
                    tables += weighted(logical(d, target));
                }
            }
        }
        let digest = [
            weighted(logical(d, &a.x)),
            weighted(logical(d, &a.v)),
            weighted(logical(d, &a.f)),
            weighted(logical(d, &a.typ)) + weighted(logical(d, &a.q)),
            tables,
            scalar,
        ];
        self.probes.push(Probe {
            unit,
            step: self.step,
            digest,
        });
    }

    fn num(&self, unit: &str, tok: &str) -> Res<f64> {
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(self.fail(
                ErrorKind::Parse,
                unit,
                format!("Expected floating point parameter instead of '{tok}' in input script"),
            )),
        }
    }

    fn int(&self, unit: &str, tok: &str) -> Res<i64> {
        tok.parse::<i64>().map_err(|_| {
            self.fail(
                ErrorKind::Parse,
                unit,
                format!("Expected integer parameter instead of '{tok}' in input script"),
            )
        })
    }

    fn positive(&self, unit: &str, tok: &str) -> Res<f64> {
        let v = self.num(unit, tok)?;
        if v <= 0.0 {
            return Err(self.fail(ErrorKind::Semantic, unit, format!("Illegal value {tok}: must be positive")));
        }
        Ok(v)
    }

    fn illegal(&self, unit: &str, cmd: &str) -> Halt {
        self.fail(ErrorKind::Parse, unit, format!("Illegal {cmd} command"))
    }

    /// Splits `args` into `(style, style_args)` groups.
    fn groups<'t>(
        &self,
        unit: &str,
        cmd: &str,
        args: &'t [String],
        arity: impl Fn(&str) -> Option<usize>,
    ) -> Res<Vec<(&'t str, &'t [String])>> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let name = args[i].as_str();
            let Some(n) = arity(name) else {
                return Err(self.fail(ErrorKind::Parse, unit, format!("Unknown {cmd} style {name}")));
            };
            if i + 1 + n > args.len() {
                return Err(self.illegal(unit, cmd));
            }
            out.push((name, &args[i + 1..i + 1 + n]));
            i += 1 + n;
        }
        if out.is_empty() {
            return Err(self.illegal(unit, cmd));
        }
        Ok(out)
    }

    fn require_box(&self, unit: &str, cmd: &str) -> Res<Geom> {
        self.geom.ok_or_else(|| {
            let mut c = cmd.to_string();
            c[..1].make_ascii_uppercase();
            self.fail(
                ErrorKind::Semantic,
                unit,
                format!("{c} command before simulation box is defined"),
            )
        })
    }

    fn natoms(&self) -> usize {
        self.a.typ.len()
    }

    fn kb_host(&mut self) -> f64 {
        self.rt.sync_host(&mut self.a.consts);
        self.a.consts.host[0]
    }

    fn dt_host(&mut self) -> f64 {
        self.rt.sync_host(&mut self.a.consts);
        self.a.consts.host[1]
    }

    fn dof(&self) -> f64 {
        let n = self.natoms();
        let d = self.dim;
        if n > 1 {
            (d * n - d) as f64
        } else {
            (d * n) as f64
        }
    }

    // ---- commands ----

    fn command(&mut self, line: &ScriptLine) -> Res {
        let name = format!("cmd:{}", line.command);
        let Some(unit) = units::unit(&name) else {
            return Err(self.fail(
                ErrorKind::Semantic,
                "input",
                format!("Unknown command: {line}"),
            ));
        };
        self.enter(unit)?;
        let args = &line.args;
        match line.command.as_str() {
            "units" => self.cmd_units(unit, args),
            "dimension" => self.cmd_dimension(unit, args),
            "boundary" => self.cmd_boundary(unit, args),
            "atom_style" => self.cmd_atom_style(unit, args),
            "lattice" => self.cmd_lattice(unit, args),
            "region" => self.cmd_region(unit, args),
            "create_box" => self.cmd_create_box(unit, args),
            "create_atoms" => self.cmd_create_atoms(unit, args),
            "mass" => self.cmd_mass(unit, args),
            "set" => self.cmd_set(unit, args),
            "velocity" => self.cmd_velocity(unit, args),
            "pair_style" => self.cmd_pair_style(unit, args),
            "pair_coeff" => self.cmd_pair_coeff(unit, args),
            "timestep" => self.cmd_timestep(unit, args),
            "thermo" => self.cmd_thermo(unit, args),
            "thermo_style" => self.cmd_thermo_style(unit, args),
            "fix" => self.cmd_fix(unit, args),
            "run" => self.cmd_run(unit, args),
            _ => unreachable!("every cmd unit has a handler"),
        }
    }

    fn cmd_units(&mut self, unit: Unit, args: &[String]) -> Res {
        if args.len() != 1 {
            return Err(self.illegal(unit, "units"));
        }
        if self.geom.is_some() {
            return Err(self.fail(ErrorKind::Semantic, unit, "Units command after simulation box is defined"));
        }
        let (kb, dt) = match args[0].as_str() {
            "lj" => (1.0, 0.005),
            "metal" => (8.617_333_262e-5, 0.001),
            "real" => (0.001_987_206_7, 1.0),
            other => return Err(self.fail(ErrorKind::Parse, unit, format!("Unknown units style {other}"))),
        };
        self.rt.sync_host(&mut self.a.consts);
        self.a.consts.host[0] = kb;
        if !self.dt_explicit {
            self.a.consts.host[1] = dt;
        }
        self.rt.modify_host(&mut self.a.consts);
        self.probe(unit, kb);
        Ok(())
    }

    fn cmd_dimension(&mut self, unit: Unit, args: &[String]) -> Res {
        if args.len() != 1 {
            return Err(self.illegal(unit, "dimension"));
        }
        if self.geom.is_some() {
            return Err(self.fail(ErrorKind::Semantic, unit, "Dimension command after simulation box is defined"));
        }
        self.dim = match args[0].as_str() {
            "2" => 2,
            "3" => 3,
            _ => return Err(self.fail(ErrorKind::Semantic, unit, "Illegal dimension command")),
        };
        Ok(())
    }

    fn cmd_boundary(&mut self, unit: Unit, args: &[String]) -> Res {
        if args.len() != 3 {
            return Err(self.illegal(unit, "boundary"));
        }
        if self.geom.is_some() {
            return Err(self.fail(ErrorKind::Semantic, unit, "Boundary command after simulation box is defined"));
        }
        for (d, tok) in args.iter().enumerate() {
            self.periodic[d] = match tok.as_str() {
                "p" => true,
                "f" => false,
                _ => return Err(self.illegal(unit, "boundary")),
            };
        }
        Ok(())
    }

    fn cmd_atom_style(&mut self, unit: Unit, args: &[String]) -> Res {
        if args.len() != 1 {
            return Err(self.illegal(unit, "atom_style"));
        }
        if self.geom.is_some() {
            return Err(self.fail(ErrorKind::Semantic, unit, "Atom_style command after simulation box is defined"));
        }
        match args[0].as_str() {
            "atomic" | "charge" => Ok(()),
            other => Err(self.fail(ErrorKind::Parse, unit, format!("Unknown atom style {other}"))),
        }
    }

    fn cmd_lattice(&mut self, unit: Unit, args: &[String]) -> Res {
        let groups = self.groups(unit, "lattice", args, |s| {
            matches!(s, "sc" | "bcc" | "fcc").then_some(1)
        })?;
        for (style, rest) in groups {
            let su = unit_of(&format!("lattice:{style}"));
            self.enter(su)?;
            let a = self.positive(su, &rest[0])?;
            let basis = match style {
                "sc" => SC,
                "bcc" => BCC,
                _ => FCC,
            };
            self.lattice = Some(Lattice { basis, a });
        }
        Ok(())
    }

    fn cmd_region(&mut self, unit: Unit, args: &[String]) -> Res {
        if args.len() < 2 {
            return Err(self.illegal(unit, "region"));
        }
        let id = args[0].clone();
        if self.regions.contains_key(&id) {
            return Err(self.fail(ErrorKind::Semantic, unit, format!("Reuse of region ID {id}")));
        }
        let groups = self.groups(unit, "region", &args[1..], |s| match s {
            "block" => Some(6),
            "sphere" => Some(4),
            _ => None,
        })?;
        let mut shapes = Vec::new();
        for (style, rest) in groups {
            let su = unit_of(&format!("region:{style}"));
            self.enter(su)?;
            let Some(lat) = self.lattice else {
                return Err(self.fail(ErrorKind::Semantic, su, "Use of region with undefined lattice"));
            };
            let vals = rest.iter().map(|t| self.num(su, t)).collect::<Res<Vec<f64>>>()?;
            let s = lat.a;
            let shape = if style == "block" {
                let lo = [vals[0] * s, vals[2] * s, vals[4] * s];
                let hi = [vals[1] * s, vals[3] * s, vals[5] * s];
                if (0..3).any(|d| hi[d] <= lo[d]) {
                    return Err(self.fail(ErrorKind::Semantic, su, "Illegal region block: lo >= hi"));
                }
                Shape::Block { lo, hi }
            } else {
                if vals[3] <= 0.0 {
                    return Err(self.fail(ErrorKind::Semantic, su, "Illegal region sphere radius"));
                }
                Shape::Sphere {
                    c: [vals[0] * s, vals[1] * s, vals[2] * s],
                    r: vals[3] * s,
                }
            };
            shapes.push(shape);
        }
        self.regions.insert(id, Region(shapes));
        Ok(())
    }

    fn cmd_create_box(&mut self, unit: Unit, args: &[String]) -> Res {
        if args.len() != 2 {
            return Err(self.illegal(unit, "create_box"));
        }
        if self.geom.is_some() {
            return Err(self.fail(ErrorKind::Semantic, unit, "Cannot create_box after simulation box is defined"));
        }
        let n = self.int(unit, &args[0])?;
        if !(1..=16).contains(&n) {
            return Err(self.fail(ErrorKind::Semantic, unit, "Illegal number of atom types"));
        }
        let Some(region) = self.regions.get(&args[1]) else {
            return Err(self.fail(ErrorKind::Semantic, unit, format!("Create_box region {} does not exist", args[1])));
        };
        let (mut lo, mut hi) = region.bounds();
        if self.dim == 2 {
            lo[2] = -0.5;
            hi[2] = 0.5;
        }
        self.geom = Some(Geom {
            lo,
            hi,
            periodic: if self.dim == 2 {
                [self.periodic[0], self.periodic[1], true]
            } else {
                self.periodic
            },
            dim: self.dim,
        });
        let nt = n as usize;
        self.ntypes = nt;
        let a = &mut self.a;
        self.rt.resize(&mut a.mass, nt + 1);
        a.mass.host.fill(1.0);
        self.rt.modify_host(&mut a.mass);
        self.rt.resize(&mut a.coeff, 2 * (nt + 1) * (nt + 1));
        a.coeff.host.fill(1.0);
        self.rt.modify_host(&mut a.coeff);
        self.probe(unit, n as f64);
        Ok(())
    }

    /// Lattice sites inside the box; `None` when the enumeration alone would
    /// exceed the atom cap many times over.
    fn lattice_points(&self, geom: &Geom, lat: Lattice) -> Option<Vec<[f64; 3]>> {
        let mut pts = Vec::new();
        let a = lat.a;
        let range = |d: usize| -> (i64, i64) {
            if d >= geom.dim {
                (0, 0)
            } else {
                (
                    ((geom.lo[d] / a).floor() as i64).saturating_sub(1),
                    ((geom.hi[d] / a).ceil() as i64).saturating_add(1),
                )
            }
        };
        let (rx, ry, rz) = (range(0), range(1), range(2));
        let sites = [rx, ry, rz]
            .iter()
            .map(|(lo, hi)| *hi as f64 - *lo as f64 + 1.0)
            .product::<f64>()
            * lat.basis.len() as f64;
        if !(sites <= (64 * MAX_ATOMS) as f64) {
            return None;
        }
        for k in rz.0..=rz.1 {
            for j in ry.0..=ry.1 {
                for i in rx.0..=rx.1 {
                    for b in lat.basis {
                        if geom.dim == 2 && b[2] != 0.0 {
                            continue;
                        }
                        let mut p = [(i as f64 + b[0]) * a, (j as f64 + b[1]) * a, (k as f64 + b[2]) * a];
                        if geom.dim == 2 {
                            p[2] = 0.0;
                        }
                        if geom.inside(p) {
                            pts.push(p);
                        }
                    }
                }
            }
        }
        Some(pts)
    }

    fn cmd_create_atoms(&mut self, unit: Unit, args: &[String]) -> Res {
        let geom = self.require_box(unit, "create_atoms")?;
        if args.len() < 2 {
            return Err(self.illegal(unit, "create_atoms"));
        }
        let t = self.int(unit, &args[0])?;
        if t < 1 || t as usize > self.ntypes {
            return Err(self.fail(ErrorKind::Semantic, unit, "Invalid atom type in create_atoms command"));
        }
        let groups = self.groups(unit, "create_atoms", &args[1..], |s| match s {
            "box" => Some(0),
            "region" => Some(1),
            "random" => Some(3),
            _ => None,
        })?;
        for (style, rest) in groups {
            let su = unit_of(&format!("create_atoms:{style}"));
            self.enter(su)?;
            let pts = match style {
                "box" => {
                    let Some(lat) = self.lattice else {
                        return Err(self.fail(ErrorKind::Semantic, su, "Cannot create atoms with undefined lattice"));
                    };
                    self.lattice_points(&geom, lat)
                        .ok_or_else(|| self.fail(ErrorKind::Semantic, su, "Too many atoms"))?
                }
                "region" => {
                    let Some(lat) = self.lattice else {
                        return Err(self.fail(ErrorKind::Semantic, su, "Cannot create atoms with undefined lattice"));
                    };
                    let Some(region) = self.regions.get(&rest[0]).cloned() else {
                        return Err(self.fail(ErrorKind::Semantic, su, format!("Create_atoms region {} does not exist", rest[0])));
                    };
                    self.lattice_points(&geom, lat)
                        .ok_or_else(|| self.fail(ErrorKind::Semantic, su, "Too many atoms"))?
                        .into_iter()
                        .filter(|p| region.contains(*p, geom.dim))
                        .collect()
                }
                _ => {
                    let n = self.int(su, &rest[0])?;
                    let seed = self.int(su, &rest[1])?;
                    if n < 0 || seed < 0 {
                        return Err(self.fail(ErrorKind::Semantic, su, "Illegal create_atoms random parameters"));
                    }
                    let Some(region) = self.regions.get(&rest[2]).cloned() else {
                        return Err(self.fail(ErrorKind::Semantic, su, format!("Create_atoms region {} does not exist", rest[2])));
                    };
                    if self.bug(2) && self.natoms() > 0 {
                        return Err(self.fail(
                            ErrorKind::Runtime,
                            su,
                            "an illegal memory access was encountered",
                        ));
                    }
                    if n as usize > MAX_ATOMS {
                        return Err(self.fail(ErrorKind::Semantic, su, "Too many atoms"));
                    }
                    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
                    let (rlo, rhi) = region.bounds();
                    let mut pts = Vec::new();
                    let mut tries = 0;
                    while pts.len() < n as usize && tries < 1000 * (n as usize).max(1) {
                        tries += 1;
                        let mut p = [0.0; 3];
                        for d in 0..geom.dim {
                            let lo = rlo[d].max(geom.lo[d]);
                            let hi = rhi[d].min(geom.hi[d]);
                            p[d] = lo + rng.random::<f64>() * (hi - lo).max(0.0);
                        }
                        if geom.inside(p) && region.contains(p, geom.dim) {
                            pts.push(p);
                        }
                    }
                    pts
                }
            };
            self.append_atoms(su, &pts, t as f64, style == "region" && self.bug(13))?;
        }
        Ok(())
    }

    fn append_atoms(&mut self, unit: Unit, pts: &[[f64; 3]], t: f64, skip_type_mark: bool) -> Res {
        let old = self.natoms();
        let n = old + pts.len();
        if n > MAX_ATOMS {
            return Err(self.fail(ErrorKind::Semantic, unit, "Too many atoms"));
        }
        let rt = &mut self.rt;
        let a = &mut self.a;
        for arr in [&mut a.x, &mut a.v, &mut a.typ, &mut a.q] {
            rt.sync_host(arr);
        }
        rt.resize(&mut a.x, 3 * n);
        rt.resize(&mut a.v, 3 * n);
        rt.resize(&mut a.f, 3 * n);
        rt.resize(&mut a.typ, n);
        rt.resize(&mut a.q, n);
        for (k, p) in pts.iter().enumerate() {
            let i = old + k;
            a.x.host[3 * i..3 * i + 3].copy_from_slice(p);
            a.typ.host[i] = t;
        }
        rt.modify_host(&mut a.x);
        rt.modify_host(&mut a.v);
        rt.modify_host(&mut a.q);
        if !skip_type_mark {
            rt.modify_host(&mut a.typ);
        }
        self.probe(unit, pts.len() as f64);
        Ok(())
    }

    fn cmd_mass(&mut self, unit: Unit, args: &[String]) -> Res {
        self.require_box(unit, "mass")?;
        if args.len() != 2 {
            return Err(self.illegal(unit, "mass"));
        }
        let m = self.num(unit, &args[1])?;
        if m <= 0.0 {
            return Err(self.fail(ErrorKind::Semantic, unit, "Invalid mass value"));
        }
        if args[0] == "*" {
            self.rt.sync_host(&mut self.a.mass);
            self.a.mass.host[1..].fill(m);
            self.rt.modify_host(&mut self.a.mass);
        } else {
            let t = self.int(unit, &args[0]).map_err(|_| {
                self.fail(ErrorKind::Semantic, unit, "Invalid type for mass set")
            })?;
            if t < 1 || t as usize > self.ntypes {
                return Err(self.fail(ErrorKind::Semantic, unit, "Invalid type for mass set"));
            }
            if self.bug(12) {
                // device-side write over pending host writes
                self.a.mass.device[t as usize] = m;
                self.rt.modify_device(&mut self.a.mass);
                self.rt.launch(EventKind::ParallelFor, unit);
            } else {
                self.rt.sync_host(&mut self.a.mass);
                self.a.mass.host[t as usize] = m;
                self.rt.modify_host(&mut self.a.mass);
            }
        }
        self.probe(unit, m);
        Ok(())
    }

    fn cmd_set(&mut self, unit: Unit, args: &[String]) -> Res {
        self.require_box(unit, "set")?;
        if args.len() < 4 || args[0] != "group" {
            return Err(self.illegal(unit, "set"));
        }
        if args[1] != "all" {
            return Err(self.fail(ErrorKind::Semantic, unit, format!("Could not find set group ID {}", args[1])));
        }
        let groups = self.groups(unit, "set", &args[2..], |s| {
            matches!(s, "charge" | "type").then_some(1)
        })?;
        for (style, rest) in groups {
            let su = unit_of(&format!("set:{style}"));
            self.enter(su)?;
            if style == "charge" {
                let qv = self.num(su, &rest[0])?;
                self.rt.sync_host(&mut self.a.q);
                self.a.q.host.fill(qv);
                self.rt.modify_host(&mut self.a.q);
                self.probe(su, qv);
            } else {
                let t = self.int(su, &rest[0])?;
                if t < 1 || t as usize > self.ntypes {
                    return Err(self.fail(ErrorKind::Semantic, su, "Invalid value in set command"));
                }
                if self.bug(17) {
                    self.rt.read_device(&self.a.typ);
                } else {
                    self.rt.sync_device(&mut self.a.typ);
                }
                exec_mut(self.dev, &mut self.a.typ).fill(t as f64);
                self.rt.modify_device(&mut self.a.typ);
                self.rt.launch(EventKind::ParallelFor, su);
                self.probe(su, t as f64);
            }
        }
        Ok(())
    }

    fn host_temperature(&mut self) -> f64 {
        let kb = self.kb_host();
        let a = &mut self.a;
        self.rt.sync_host(&mut a.mass);
        self.rt.sync_host(&mut a.typ);
        let mut sum = 0.0;
        for i in 0..a.typ.len() {
            let m = atom_mass(&a.mass.host, a.typ.host[i]);
            for d in 0..3 {
                sum += m * a.v.host[3 * i + d].powi(2);
            }
        }
        let dof = self.dof();
        if dof > 0.0 {
            sum / (dof * kb)
        } else {
            0.0
        }
    }

    fn cmd_velocity(&mut self, unit: Unit, args: &[String]) -> Res {
        self.require_box(unit, "velocity")?;
        if args.len() < 2 {
            return Err(self.illegal(unit, "velocity"));
        }
        if args[0] != "all" {
            return Err(self.fail(ErrorKind::Semantic, unit, format!("Could not find velocity group ID {}", args[0])));
        }
        let groups = self.groups(unit, "velocity", &args[1..], |s| match s {
            "create" => Some(2),
            "set" => Some(3),
            "scale" => Some(1),
            "zero" => Some(1),
            _ => None,
        })?;
        for (style, rest) in groups {
            let su = unit_of(&format!("velocity:{style}"));
            self.enter(su)?;
            match style {
                "create" => self.velocity_create(su, rest)?,
                "set" => self.velocity_set(su, rest)?,
                "scale" => self.velocity_scale(su, rest)?,
                _ => self.velocity_zero(su, rest)?,
            }
        }
        Ok(())
    }

    fn velocity_create(&mut self, su: Unit, rest: &[String]) -> Res {
        let t = self.num(su, &rest[0])?;
        if t < 0.0 {
            return Err(self.fail(ErrorKind::Semantic, su, "Illegal velocity create temperature"));
        }
        let seed = self.int(su, &rest[1])?;
        if seed < 0 {
            return Err(self.fail(ErrorKind::Semantic, su, "Illegal velocity create seed"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let dim = self.dim;
        self.rt.sync_host(&mut self.a.v);
        self.rt.sync_host(&mut self.a.mass);
        self.rt.sync_host(&mut self.a.typ);
        let n = self.natoms();
        let mut p = [0.0; 3];
        let mut mtot = 0.0;
        for i in 0..n {
            let m = atom_mass(&self.a.mass.host, self.a.typ.host[i]);
            mtot += m;
            for d in 0..3 {
                let g: f64 = rng.sample(StandardNormal);
                let val = if d < dim { g / m.sqrt() } else { 0.0 };
                self.a.v.host[3 * i + d] = val;
                p[d] += m * val;
            }
        }
        if mtot > 0.0 {
            for i in 0..n {
                for d in 0..dim {
                    self.a.v.host[3 * i + d] -= p[d] / mtot;
                }
            }
        }
        let cur = self.host_temperature();
        let factor = if cur > 0.0 { (t / cur).sqrt() } else { 0.0 };
        for val in &mut self.a.v.host {
            *val *= factor;
        }
        self.rt.modify_host(&mut self.a.v);
        self.probe(su, t);
        Ok(())
    }

    fn velocity_set(&mut self, su: Unit, rest: &[String]) -> Res {
        let vals = rest.iter().map(|t| self.num(su, t)).collect::<Res<Vec<f64>>>()?;
        if self.bug(7) {
            self.rt.read_device(&self.a.v);
        } else {
            self.rt.sync_device(&mut self.a.v);
        }
        let dim = self.dim;
        for (k, val) in exec_mut(self.dev, &mut self.a.v).iter_mut().enumerate() {
            *val = if k % 3 < dim { vals[k % 3] } else { 0.0 };
        }
        self.rt.modify_device(&mut self.a.v);
        self.rt.launch(EventKind::ParallelFor, su);
        self.probe(su, vals.iter().sum());
        Ok(())
    }

    fn velocity_scale(&mut self, su: Unit, rest: &[String]) -> Res {
        let t = self.num(su, &rest[0])?;
        if t < 0.0 {
            return Err(self.fail(ErrorKind::Semantic, su, "Illegal velocity scale temperature"));
        }
        let a = &mut self.a;
        if self.dev && self.cfg.bugs.contains(&BugId(8)) {
            self.rt.read_device(&a.v);
        } else {
            self.rt.sync_device(&mut a.v);
        }
        self.rt.sync_device(&mut a.mass);
        self.rt.sync_device(&mut a.typ);
        self.rt.sync_device(&mut a.consts);
        let dev = self.dev;
        let kb = exec(dev, &a.consts)[0];
        let (mass, typ) = (exec(dev, &a.mass), exec(dev, &a.typ));
        let v = exec(dev, &a.v);
        let per: Vec<f64> = (0..typ.len())
            .map(|i| atom_mass(mass, typ[i]) * (0..3).map(|d| v[3 * i + d].powi(2)).sum::<f64>())
            .collect();
        let dof = self.dof();
        let cur = if dof > 0.0 { AccumulationOrder::Sequential.sum(&per) / (dof * kb) } else { 0.0 };
        if cur > 0.0 {
            let factor = (t / cur).sqrt();
            for val in exec_mut(dev, &mut self.a.v) {
                *val *= factor;
            }
        }
        self.rt.modify_device(&mut self.a.v);
        self.rt.launch(EventKind::ParallelReduce, su);
        self.rt.launch(EventKind::ParallelFor, su);
        self.probe(su, cur);
        Ok(())
    }

    fn velocity_zero(&mut self, su: Unit, rest: &[String]) -> Res {
        if rest[0] != "linear" {
            return Err(self.fail(ErrorKind::Parse, su, "Illegal velocity zero keyword"));
        }
        if self.bug(4) {
            self.rt.sync_device(&mut self.a.v);
            self.rt.read_host(&self.a.v);
        } else {
            self.rt.sync_host(&mut self.a.v);
        }
        self.rt.sync_host(&mut self.a.mass);
        self.rt.sync_host(&mut self.a.typ);
        let a = &mut self.a;
        let n = a.typ.len();
        let mut p = [0.0; 3];
        let mut mtot = 0.0;
        for i in 0..n {
            let m = atom_mass(&a.mass.host, a.typ.host[i]);
            mtot += m;
            for d in 0..3 {
                p[d] += m * a.v.host[3 * i + d];
            }
        }
        if mtot > 0.0 {
            for i in 0..n {
                for d in 0..3 {
                    a.v.host[3 * i + d] -= p[d] / mtot;
                }
            }
        }
        self.rt.modify_host(&mut self.a.v);
        self.probe(su, p.iter().map(|c| c.abs()).sum());
        Ok(())
    }

    fn cmd_pair_style(&mut self, unit: Unit, args: &[String]) -> Res {
        let groups = self.groups(unit, "pair_style", args, |s| {
            matches!(s, "soft" | "harmonic" | "gauss" | "morse").then_some(1)
        })?;
        let mut pairs = Vec::new();
        for (style, rest) in groups {
            let su = unit_of(&format!("pair:{style}"));
            self.enter(su)?;
            let rc = self.positive(su, &rest[0])?;
            let kind = match style {
                "soft" => PairKind::Soft,
                "harmonic" => PairKind::Harmonic,
                "gauss" => PairKind::Gauss,
                _ => PairKind::Morse,
            };
            pairs.push(PairStyle { kind, rc });
        }
        self.pairs = pairs;
        Ok(())
    }

    fn type_range(&self, unit: &str, tok: &str) -> Res<(usize, usize)> {
        if tok == "*" {
            return Ok((1, self.ntypes));
        }
        match tok.parse::<i64>() {
            Ok(t) if t >= 1 && t as usize <= self.ntypes => Ok((t as usize, t as usize)),
            _ => Err(self.fail(ErrorKind::Semantic, unit, "Incorrect args for pair coefficients")),
        }
    }

    fn cmd_pair_coeff(&mut self, unit: Unit, args: &[String]) -> Res {
        self.require_box(unit, "pair_coeff")?;
        if self.pairs.is_empty() {
            return Err(self.fail(ErrorKind::Semantic, unit, "Pair_coeff command before pair_style is defined"));
        }
        if args.len() != 4 {
            return Err(self.illegal(unit, "pair_coeff"));
        }
        let (ilo, ihi) = self.type_range(unit, &args[0])?;
        let (jlo, jhi) = self.type_range(unit, &args[1])?;
        let c1 = self.num(unit, &args[2])?;
        let c2 = self.num(unit, &args[3])?;
        let nt = self.ntypes;
        self.rt.sync_host(&mut self.a.coeff);
        for i in ilo..=ihi {
            for j in jlo..=jhi {
                for (p, q) in [(i, j), (j, i)] {
                    let base = (p * (nt + 1) + q) * 2;
                    self.a.coeff.host[base] = c1;
                    self.a.coeff.host[base + 1] = c2;
                }
            }
        }
        self.rt.modify_host(&mut self.a.coeff);
        self.probe(unit, c1 + c2);
        Ok(())
    }

    fn cmd_timestep(&mut self, unit: Unit, args: &[String]) -> Res {
        if args.len() != 1 {
            return Err(self.illegal(unit, "timestep"));
        }
        let dt = self.positive(unit, &args[0])?;
        self.rt.sync_host(&mut self.a.consts);
        self.a.consts.host[1] = dt;
        self.rt.modify_host(&mut self.a.consts);
        self.dt_explicit = true;
        self.probe(unit, dt);
        Ok(())
    }

    fn cmd_thermo(&mut self, unit: Unit, args: &[String]) -> Res {
        if args.len() != 1 {
            return Err(self.illegal(unit, "thermo"));
        }
        let n = self.int(unit, &args[0])?;
        if n < 0 {
            return Err(self.fail(ErrorKind::Semantic, unit, "Illegal thermo command"));
        }
        self.thermo_every = n as u64;
        Ok(())
    }

    fn cmd_thermo_style(&mut self, unit: Unit, args: &[String]) -> Res {
        if args.len() < 2 || args[0] != "custom" {
            return Err(self.illegal(unit, "thermo_style"));
        }
        let mut cols = Vec::new();
        for tok in &args[1..] {
            let Some(c) = Column::parse(tok) else {
                return Err(self.fail(ErrorKind::Parse, unit, format!("Unknown thermo keyword {tok}")));
            };
            cols.push(c);
        }
        if cols[0] != Column::Step {
            cols.retain(|c| *c != Column::Step);
            cols.insert(0, Column::Step);
        }
        self.columns = cols;
        Ok(())
    }

    fn cmd_fix(&mut self, unit: Unit, args: &[String]) -> Res {
        if args.len() < 3 {
            return Err(self.illegal(unit, "fix"));
        }
        if args[1] != "all" {
            return Err(self.fail(ErrorKind::Semantic, unit, format!("Could not find fix group ID {}", args[1])));
        }
        let groups = self.groups(unit, "fix", &args[2..], |s| match s {
            "nve" => Some(0),
            "langevin" => Some(4),
            "temp/berendsen" => Some(3),
            "viscous" => Some(1),
            "setforce" => Some(3),
            "momentum" => Some(1),
            _ => None,
        })?;
        let mut styles = Vec::new();
        for (style, rest) in groups {
            let su = unit_of(&format!("fix:{style}"));
            self.enter(su)?;
            let fs = match style {
                "nve" => FixStyle::Nve,
                "langevin" => {
                    let ts = self.num(su, &rest[0])?;
                    let te = self.num(su, &rest[1])?;
                    let damp = self.positive(su, &rest[2])?;
                    let seed = self.int(su, &rest[3])?;
                    if ts < 0.0 || te < 0.0 || seed < 0 {
                        return Err(self.fail(ErrorKind::Semantic, su, "Illegal fix langevin command"));
                    }
                    let mut target = MirroredArray::new("langevin_target");
                    self.rt.resize(&mut target, 1);
                    target.host[0] = ts;
                    self.rt.modify_host(&mut target);
                    FixStyle::Langevin {
                        ts,
                        te,
                        damp,
                        seed: seed as u64,
                        target,
                    }
                }
                "temp/berendsen" => {
                    let ts = self.num(su, &rest[0])?;
                    let te = self.num(su, &rest[1])?;
                    let damp = self.positive(su, &rest[2])?;
                    if ts < 0.0 || te < 0.0 {
                        return Err(self.fail(ErrorKind::Semantic, su, "Illegal fix temp/berendsen command"));
                    }
                    FixStyle::Berendsen { ts, te, damp }
                }
                "viscous" => FixStyle::Viscous(self.num(su, &rest[0])?),
                "setforce" => FixStyle::SetForce([
                    self.num(su, &rest[0])?,
                    self.num(su, &rest[1])?,
                    self.num(su, &rest[2])?,
                ]),
                _ => {
                    let n = self.int(su, &rest[0])?;
                    if n <= 0 {
                        return Err(self.fail(ErrorKind::Semantic, su, "Illegal fix momentum command"));
                    }
                    FixStyle::Momentum(n as u64)
                }
            };
            styles.push(fs);
        }
        let id = args[0].clone();
        if let Some(pos) = self.fixes.iter().position(|f| f.id == id) {
            let mut old = self.fixes.remove(pos);
            for s in &mut old.styles {
                if let FixStyle::Langevin { target, .. } = s {
                    self.rt.free(target);
                }
            }
        }
        self.fixes.push(Fix { id, styles });
        Ok(())
    }

    fn cmd_run(&mut self, unit: Unit, args: &[String]) -> Res {
        self.require_box(unit, "run")?;
        if args.len() != 1 {
            return Err(self.illegal(unit, "run"));
        }
        let n = self.int(unit, &args[0])?;
        if n < 0 {
            return Err(self.fail(ErrorKind::Semantic, unit, "Illegal run command"));
        }
        self.entered_dynamics = true;
        let n = n as u64;
        self.run_start = self.step;
        self.run_len = n;
        self.setup()?;
        for s in 1..=n {
            self.work += 1 + self.natoms() as u64;
            self.check_clock()?;
            self.step += 1;
            self.timestep(s == n)?;
        }
        Ok(())
    }

    // ---- dynamics ----

    fn geom(&self) -> Geom {
        self.geom.expect("dynamics require a box")
    }

    fn has_nve(&self) -> usize {
        self.fixes
            .iter()
            .flat_map(|f| &f.styles)
            .filter(|s| matches!(s, FixStyle::Nve))
            .count()
    }

    fn setup(&mut self) -> Res {
        self.bin_atoms()?;
        self.force_stage()?;
        if self.dim == 2 {
            self.enforce2d()?;
        }
        if self.last_row_step != Some(self.step) {
            self.thermo_output()?;
        }
        Ok(())
    }

    fn timestep(&mut self, last: bool) -> Res {
        let nve = self.has_nve();
        for _ in 0..nve {
            self.nve_initial()?;
        }
        let g = self.geom();
        if (0..g.dim).any(|d| g.periodic[d]) {
            self.pbc_wrap()?;
        }
        if (0..g.dim).any(|d| !g.periodic[d]) {
            self.reflect()?;
        }
        if self.step % BIN_EVERY == 0 {
            self.bin_atoms()?;
        }
        self.force_stage()?;
        if self.dim == 2 {
            self.enforce2d()?;
        }
        self.post_force()?;
        for _ in 0..nve {
            self.nve_final()?;
        }
        self.end_of_step()?;
        let every = self.thermo_every;
        if (every > 0 && self.step % every == 0) || last {
            self.thermo_output()?;
        }
        Ok(())
    }

    fn ramp(&self, ts: f64, te: f64) -> f64 {
        if self.run_len == 0 {
            return ts;
        }
        let frac = (self.step - self.run_start) as f64 / self.run_len as f64;
        ts + (te - ts) * frac
    }

    fn bin_atoms(&mut self) -> Res {
        let unit = "k:bin_atoms";
        self.enter(unit)?;
        let n = self.natoms();
        if self.bug(20) && n > TRUNCATED_COPY_ATOMS {
            self.rt.sync_device_prefix(&mut self.a.x, 3 * TRUNCATED_COPY_ATOMS);
        } else {
            self.rt.sync_device(&mut self.a.x);
        }
        let g = self.geom();
        let x = exec(self.dev, &self.a.x);
        // unit-width bins, coarsened when a dimension would exceed MAX_BINS
        let cells: Vec<usize> = (0..g.dim)
            .map(|d| (g.len(d).ceil() as usize).clamp(1, MAX_BINS))
            .collect();
        let width: Vec<f64> = (0..g.dim)
            .map(|d| if g.len(d).ceil() as usize > MAX_BINS { g.len(d) / MAX_BINS as f64 } else { 1.0 })
            .collect();
        let total: usize = cells.iter().product();
        let mut counts = vec![0u64; total];
        for i in 0..n {
            let mut idx = 0;
            for d in 0..g.dim {
                let c = (((x[3 * i + d] - g.lo[d]) / width[d]).floor().max(0.0) as usize).min(cells[d] - 1);
                idx = idx * cells[d] + c;
            }
            counts[idx] += 1;
        }
        let mut acc = 0u64;
        let mut checksum = 0.0;
        for (c, k) in counts.iter().enumerate() {
            acc += k;
            checksum += (acc * (c as u64 + 1)) as f64;
        }
        self.rt.launch(EventKind::ParallelScan, unit);
        self.probe(unit, checksum);
        Ok(())
    }

    fn pbc_wrap(&mut self) -> Res {
        let unit = "k:pbc_wrap";
        self.enter(unit)?;
        self.rt.sync_device(&mut self.a.x);
        let g = self.geom();
        for (k, val) in exec_mut(self.dev, &mut self.a.x).iter_mut().enumerate() {
            let d = k % 3;
            if d < g.dim && g.periodic[d] && val.is_finite() {
                *val = g.lo[d] + (*val - g.lo[d]).rem_euclid(g.len(d));
            }
        }
        self.rt.modify_device(&mut self.a.x);
        self.rt.launch(EventKind::ParallelFor, unit);
        self.probe(unit, 0.0);
        Ok(())
    }

    fn reflect(&mut self) -> Res {
        let unit = "k:reflect";
        self.enter(unit)?;
        self.rt.sync_device(&mut self.a.x);
        self.rt.sync_device(&mut self.a.v);
        let g = self.geom();
        let dev = self.dev;
        let n = self.natoms();
        let mut hits = 0.0;
        {
            let a = &mut self.a;
            let (x, v) = (exec_mut(dev, &mut a.x), exec_mut(dev, &mut a.v));
            for i in 0..n {
                for d in 0..g.dim {
                    if g.periodic[d] {
                        continue;
                    }
                    let k = 3 * i + d;
                    if x[k] < g.lo[d] {
                        x[k] = 2.0 * g.lo[d] - x[k];
                        v[k] = -v[k];
                        hits += 1.0;
                    } else if x[k] >= g.hi[d] {
                        x[k] = 2.0 * g.hi[d] - x[k];
                        v[k] = -v[k];
                        hits += 1.0;
                    }
                }
            }
        }
        if self.bug(18) {
            self.rt.modify_host(&mut self.a.x);
            self.rt.modify_host(&mut self.a.v);
        } else {
            self.rt.modify_device(&mut self.a.x);
            self.rt.modify_device(&mut self.a.v);
        }
        self.rt.launch(EventKind::ParallelFor, unit);
        self.probe(unit, hits);
        Ok(())
    }

    fn sync_pair_inputs(&mut self) {
        self.rt.sync_device(&mut self.a.x);
        self.rt.sync_device(&mut self.a.typ);
        self.rt.sync_device(&mut self.a.coeff);
    }

    fn pair_eval(&mut self, styles: &[PairStyle]) -> PairOut {
        let g = self.geom();
        let dev = self.dev;
        let n = self.natoms() as u64;
        self.work += n * n * styles.len() as u64;
        let a = &self.a;
        pair_compute(&g, exec(dev, &a.x), exec(dev, &a.typ), exec(dev, &a.coeff), self.ntypes, styles)
    }

    fn force_stage(&mut self) -> Res {
        if self.pairs.is_empty() {
            let unit = "k:force_clear";
            self.enter(unit)?;
            exec_mut(self.dev, &mut self.a.f).fill(0.0);
            self.rt.modify_device(&mut self.a.f);
            self.rt.launch(EventKind::ParallelFor, unit);
            self.probe(unit, 0.0);
            return Ok(());
        }
        let pairs = self.pairs.clone();
        for (k, style) in pairs.iter().enumerate() {
            let unit = style.force_unit();
            self.enter(unit)?;
            self.sync_pair_inputs();
            if k > 0 {
                self.rt.sync_device(&mut self.a.f);
            }
            let out = self.pair_eval(std::slice::from_ref(style));
            let f = exec_mut(self.dev, &mut self.a.f);
            if k == 0 {
                f.copy_from_slice(&out.f);
            } else {
                for (dst, src) in f.iter_mut().zip(&out.f) {
                    *dst += src;
                }
            }
            match style.kind {
                PairKind::Gauss if self.bug(3) => {
                    self.rt.modify_device(&mut self.a.f);
                    self.a.f.host.fill(0.0);
                    self.rt.modify_host(&mut self.a.f);
                }
                PairKind::Morse if self.bug(16) => self.rt.modify_host(&mut self.a.f),
                _ => self.rt.modify_device(&mut self.a.f),
            }
            self.rt.launch(EventKind::ParallelFor, unit);
            self.probe(unit, 0.0);
        }
        Ok(())
    }

    fn enforce2d(&mut self) -> Res {
        let unit = "k:enforce2d";
        self.enter(unit)?;
        self.rt.sync_device(&mut self.a.f);
        self.rt.sync_device(&mut self.a.v);
        let dev = self.dev;
        for arr in [&mut self.a.f, &mut self.a.v] {
            for val in exec_mut(dev, arr).iter_mut().skip(2).step_by(3) {
                *val = 0.0;
            }
        }
        if self.bug(15) {
            self.rt.modify_host(&mut self.a.f);
        } else {
            self.rt.modify_device(&mut self.a.f);
        }
        self.rt.modify_device(&mut self.a.v);
        self.rt.launch(EventKind::ParallelFor, unit);
        self.probe(unit, 0.0);
        Ok(())
    }

    fn sync_integrator_inputs(&mut self) {
        let a = &mut self.a;
        for arr in [&mut a.x, &mut a.v, &mut a.f, &mut a.typ, &mut a.mass, &mut a.consts] {
            self.rt.sync_device(arr);
        }
    }

    fn nve_initial(&mut self) -> Res {
        let unit = "k:nve_initial";
        self.enter(unit)?;
        self.sync_integrator_inputs();
        let dev = self.dev;
        let a = &mut self.a;
        let dt = exec(dev, &a.consts)[1];
        let n = a.typ.len();
        let mass = exec(dev, &a.mass).to_vec();
        let typ = exec(dev, &a.typ).to_vec();
        let f = exec(dev, &a.f).to_vec();
        {
            let v = exec_mut(dev, &mut a.v);
            for i in 0..n {
                let dtfm = 0.5 * dt / atom_mass(&mass, typ[i]);
                for d in 0..3 {
                    v[3 * i + d] += dtfm * f[3 * i + d];
                }
            }
        }
        let v = exec(dev, &a.v).to_vec();
        let x = exec_mut(dev, &mut a.x);
        for k in 0..3 * n {
            x[k] += dt * v[k];
        }
        self.rt.modify_device(&mut self.a.x);
        self.rt.modify_device(&mut self.a.v);
        self.rt.launch(EventKind::ParallelFor, unit);
        self.probe(unit, 0.0);
        Ok(())
    }

    fn nve_final(&mut self) -> Res {
        let unit = "k:nve_final";
        self.enter(unit)?;
        self.sync_integrator_inputs();
        let dev = self.dev;
        let a = &mut self.a;
        let dt = exec(dev, &a.consts)[1];
        let n = a.typ.len();
        let mass = exec(dev, &a.mass).to_vec();
        let typ = exec(dev, &a.typ).to_vec();
        let f = exec(dev, &a.f).to_vec();
        let v = exec_mut(dev, &mut a.v);
        for i in 0..n {
            let dtfm = 0.5 * dt / atom_mass(&mass, typ[i]);
            for d in 0..3 {
                v[3 * i + d] += dtfm * f[3 * i + d];
            }
        }
        self.rt.modify_device(&mut self.a.v);
        self.rt.launch(EventKind::ParallelFor, unit);
        self.probe(unit, 0.0);
        Ok(())
    }

    fn post_force(&mut self) -> Res {
        for fi in 0..self.fixes.len() {
            for si in 0..self.fixes[fi].styles.len() {
                match self.fixes[fi].styles[si].clone() {
                    FixStyle::SetForce(vals) => self.setforce(vals)?,
                    FixStyle::Viscous(gamma) => self.viscous(gamma)?,
                    FixStyle::Langevin {
                        ts, te, damp, seed, ..
                    } => self.langevin(fi, si, ts, te, damp, seed)?,
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn setforce(&mut self, vals: [f64; 3]) -> Res {
        let unit = "k:setforce";
        self.enter(unit)?;
        self.rt.sync_device(&mut self.a.f);
        let dim = self.dim;
        for (k, val) in exec_mut(self.dev, &mut self.a.f).iter_mut().enumerate() {
            if k % 3 < dim {
                *val = vals[k % 3];
            }
        }
        if self.bug(6) {
            self.rt.modify_host(&mut self.a.f);
        } else {
            self.rt.modify_device(&mut self.a.f);
        }
        self.rt.launch(EventKind::ParallelFor, unit);
        self.probe(unit, 0.0);
        Ok(())
    }

    fn viscous(&mut self, gamma: f64) -> Res {
        let unit = "k:viscous";
        self.enter(unit)?;
        self.rt.sync_device(&mut self.a.f);
        self.rt.sync_device(&mut self.a.v);
        let dev = self.dev;
        let v = exec(dev, &self.a.v).to_vec();
        for (fv, vv) in exec_mut(dev, &mut self.a.f).iter_mut().zip(&v) {
            *fv -= gamma * vv;
        }
        if self.bug(19) {
            self.rt.modify_host(&mut self.a.f);
        } else {
            self.rt.modify_device(&mut self.a.f);
        }
        self.rt.launch(EventKind::ParallelFor, unit);
        self.probe(unit, 0.0);
        Ok(())
    }

    fn langevin(&mut self, fi: usize, si: usize, ts: f64, te: f64, damp: f64, seed: u64) -> Res {
        let unit = "k:langevin";
        self.enter(unit)?;
        let t_now = self.ramp(ts, te);
        let skip_mark = self.bug(10);
        let dev = self.dev;
        let FixStyle::Langevin { target, .. } = &mut self.fixes[fi].styles[si] else {
            unreachable!("index refers to a langevin style")
        };
        target.host[0] = t_now;
        if !skip_mark {
            self.rt.modify_host(target);
        }
        self.rt.sync_device(target);
        let t_dev = exec(dev, target)[0];
        self.sync_integrator_inputs();
        let a = &mut self.a;
        let (kb, dt) = (exec(dev, &a.consts)[0], exec(dev, &a.consts)[1]);
        let mass = exec(dev, &a.mass).to_vec();
        let typ = exec(dev, &a.typ).to_vec();
        let v = exec(dev, &a.v).to_vec();
        let dim = self.dim;
        let step = self.step;
        let f = exec_mut(dev, &mut a.f);
        for i in 0..typ.len() {
            let m = atom_mass(&mass, typ[i]);
            let gamma1 = -m / damp;
            let gamma2 = (24.0 * kb * t_dev * m / (damp * dt)).max(0.0).sqrt();
            for d in 0..dim {
                let u = noise(seed, step, i, d);
                f[3 * i + d] += gamma1 * v[3 * i + d] + gamma2 * (u - 0.5);
            }
        }
        self.rt.modify_device(&mut self.a.f);
        self.rt.launch(EventKind::ParallelFor, unit);
        self.probe(unit, t_dev);
        Ok(())
    }

    fn end_of_step(&mut self) -> Res {
        for fi in 0..self.fixes.len() {
            for si in 0..self.fixes[fi].styles.len() {
                match self.fixes[fi].styles[si].clone() {
                    FixStyle::Berendsen { ts, te, damp } => self.berendsen(ts, te, damp)?,
                    FixStyle::Momentum(n) if self.step % n == 0 => self.momentum()?,
                    _ => {}
                }
            }
        }
        Ok(())
    }

    fn berendsen(&mut self, ts: f64, te: f64, damp: f64) -> Res {
        let t_cur = self.temp_reduce(AccumulationOrder::Sequential)?;
        let unit = "k:berendsen";
        self.enter(unit)?;
        let target = self.ramp(ts, te);
        let dt = self.dt_host();
        let arg = 1.0 + dt / damp * (target / t_cur - 1.0);
        let lambda = if t_cur > 0.0 && arg > 0.0 { arg.sqrt() } else { 1.0 };
        self.rt.sync_device(&mut self.a.v);
        for val in exec_mut(self.dev, &mut self.a.v) {
            *val *= lambda;
        }
        if self.bug(1) {
            self.rt.modify_host(&mut self.a.v);
        } else {
            self.rt.modify_device(&mut self.a.v);
        }
        self.rt.launch(EventKind::ParallelFor, unit);
        self.probe(unit, lambda);
        Ok(())
    }

    fn momentum(&mut self) -> Res {
        let unit = "k:momentum";
        self.enter(unit)?;
        self.sync_integrator_inputs();
        let dev = self.dev;
        let order = AccumulationOrder::Sequential;
        let a = &mut self.a;
        let mass = exec(dev, &a.mass).to_vec();
        let typ = exec(dev, &a.typ).to_vec();
        let n = typ.len();
        let ms: Vec<f64> = typ.iter().map(|t| atom_mass(&mass, *t)).collect();
        let mtot = order.sum(&ms);
        let mut vcm = [0.0; 3];
        {
            let v = exec(dev, &a.v);
            for (d, c) in vcm.iter_mut().enumerate() {
                let p: Vec<f64> = (0..n).map(|i| ms[i] * v[3 * i + d]).collect();
                *c = if mtot > 0.0 { order.sum(&p) / mtot } else { 0.0 };
            }
        }
        let v = exec_mut(dev, &mut a.v);
        for i in 0..n {
            for d in 0..3 {
                v[3 * i + d] -= vcm[d];
            }
        }
        if self.bug(11) {
            self.rt.modify_host(&mut self.a.v);
        } else {
            self.rt.modify_device(&mut self.a.v);
        }
        self.rt.launch(EventKind::ParallelReduce, unit);
        self.rt.launch(EventKind::ParallelFor, unit);
        self.probe(unit, vcm.iter().map(|c| c.abs()).sum());
        Ok(())
    }

    // ---- reductions and output ----

    // Feedback paths pass Sequential so both backends steer identically;
    // only reported quantities use the backend's order.
    fn temp_reduce(&mut self, order: AccumulationOrder) -> Res<f64> {
        let unit = "k:temp_reduce";
        self.enter(unit)?;
        let a = &mut self.a;
        for arr in [&mut a.v, &mut a.mass, &mut a.typ] {
            self.rt.sync_device(arr);
        }
        if self.dev && self.cfg.bugs.contains(&BugId(14)) && a.consts.host[0] != 1.0 {
            self.rt.read_device(&a.consts);
        } else {
            self.rt.sync_device(&mut a.consts);
        }
        let dev = self.dev;
        let kb = exec(dev, &a.consts)[0];
        let (mass, typ, v) = (exec(dev, &a.mass), exec(dev, &a.typ), exec(dev, &a.v));
        let per: Vec<f64> = (0..typ.len())
            .map(|i| atom_mass(mass, typ[i]) * (0..3).map(|d| v[3 * i + d].powi(2)).sum::<f64>())
            .collect();
        let dof = self.dof();
        let t = if dof > 0.0 { order.sum(&per) / (dof * kb) } else { 0.0 };
        self.rt.launch(EventKind::ParallelReduce, unit);
        self.probe(unit, t);
        Ok(t)
    }

    fn potential_energy(&mut self) -> Res<f64> {
        let mut pe = 0.0;
        let mut vir = 0.0;
        for style in self.pairs.clone() {
            let unit = style.energy_unit();
            self.enter(unit)?;
            self.sync_pair_inputs();
            let out = self.pair_eval(&[style]);
            let e = self.cfg.order.sum(&out.e);
            vir += self.cfg.order.sum(&out.w);
            pe += e;
            self.rt.launch(EventKind::ParallelReduce, unit);
            self.probe(unit, e);
        }
        self.cached_virial = vir;
        Ok(pe)
    }

    fn virial(&mut self) -> Res<f64> {
        let unit = "k:virial";
        self.enter(unit)?;
        let w = if self.bug(9) {
            self.cached_virial
        } else {
            self.sync_pair_inputs();
            let pairs = self.pairs.clone();
            let out = self.pair_eval(&pairs);
            self.cfg.order.sum(&out.w)
        };
        self.rt.launch(EventKind::ParallelReduce, unit);
        self.probe(unit, w);
        Ok(w)
    }

    fn thermo_output(&mut self) -> Res {
        let cols = self.columns.clone();
        let has = |c: Column| cols.contains(&c);
        let pe = if has(Column::Pe) || has(Column::Etotal) {
            self.potential_energy()?
        } else {
            0.0
        };
        let w = if has(Column::Press) { self.virial()? } else { 0.0 };
        let t = if has(Column::Temp) || has(Column::Press) {
            self.temp_reduce(self.cfg.order)?
        } else {
            0.0
        };
        self.enter(THERMO_OUTPUT)?;
        self.rt.sync_host(&mut self.a.x);
        if self.a.x.host.iter().any(|c| !c.is_finite()) {
            return Err(self.fail(ErrorKind::Runtime, THERMO_OUTPUT, "Lost atoms: non-finite coordinates"));
        }
        let ke = if has(Column::Ke) || has(Column::Etotal) {
            if self.bug(5) && self.thermo_every < 5 {
                self.rt.read_host(&self.a.v);
            } else {
                self.rt.sync_host(&mut self.a.v);
            }
            self.rt.sync_host(&mut self.a.mass);
            self.rt.sync_host(&mut self.a.typ);
            let a = &self.a;
            (0..a.typ.len())
                .map(|i| {
                    let m = atom_mass(&a.mass.host, a.typ.host[i]);
                    0.5 * m * (0..3).map(|d| a.v.host[3 * i + d].powi(2)).sum::<f64>()
                })
                .sum()
        } else {
            0.0
        };
        let kb = self.kb_host();
        let g = self.geom();
        let vol = g.volume();
        let n = self.natoms() as f64;
        let row: Vec<f64> = cols
            .iter()
            .map(|c| match c {
                Column::Step => self.step as f64,
                Column::Temp => t,
                Column::Pe => pe,
                Column::Ke => ke,
                Column::Etotal => pe + ke,
                Column::Press => (n * kb * t + w / g.dim as f64) / vol,
                Column::Vol => vol,
            })
            .collect();
        if self.thermo.columns.is_empty() || self.thermo.rows.is_empty() {
            self.thermo.columns = cols.iter().map(|c| c.name().to_string()).collect();
        }
        let scalar = row.iter().sum();
        if self.last_row_step != Some(self.step) {
            self.thermo.rows.push(row);
            self.last_row_step = Some(self.step);
        }
        self.probe(THERMO_OUTPUT, scalar);
        Ok(())
    }
}
