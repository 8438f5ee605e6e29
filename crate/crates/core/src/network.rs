//! Planning-model graph: buses, lines, switches, loads, capacitor banks and
//! the derived structures the rest of the toolkit needs (load sections,
//! fundamental cycles, radiality cycle sets, topology enumeration).
//!
//! A parsed [`NetworkModel`] is immutable and fully validated; all operations
//! here are pure functions of it.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// One of the three phases of the system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    A,
    B,
    C,
}

pub const PHASES: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

impl Phase {
    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'A',
            Phase::B => 'B',
            Phase::C => 'C',
        }
    }

    pub fn from_letter(c: char) -> Option<Phase> {
        match c {
            'A' => Some(Phase::A),
            'B' => Some(Phase::B),
            'C' => Some(Phase::C),
            _ => None,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Nonempty subset of {A,B,C}, packed into three bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const EMPTY: PhaseSet = PhaseSet(0);

    pub fn from_phases(phases: &[Phase]) -> PhaseSet {
        let mut s = 0u8;
        for p in phases {
            s |= 1 << p.index();
        }
        PhaseSet(s)
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        PHASES.into_iter().filter(move |p| self.contains(*p))
    }

    pub fn parse(text: &str) -> Option<PhaseSet> {
        let mut s = PhaseSet::EMPTY;
        for c in text.chars() {
            let p = Phase::from_letter(c)?;
            if s.contains(p) {
                return None; // repeated letter
            }
            s.0 |= 1 << p.index();
        }
        if s.is_empty() {
            None
        } else {
            Some(s)
        }
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{}", p.letter())?;
        }
        Ok(())
    }
}

macro_rules! id_newtype {
    ($name:ident) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub usize);

        impl $name {
            pub fn index(self) -> usize {
                self.0
            }
        }
    };
}

id_newtype!(BusId);
id_newtype!(LineId);
id_newtype!(LoadId);
id_newtype!(CapId);
id_newtype!(SectionId);

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    pub name: String,
    pub phases: PhaseSet,
    pub is_source: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineSegment {
    pub name: String,
    pub from: BusId,
    pub to: BusId,
    pub phases: PhaseSet,
    pub is_switch: bool,
    /// Normal (planned) state; always closed for non-switch segments.
    pub normal_closed: bool,
    /// Truth-simulation loss knob; fraction of sending-end power lost.
    pub loss_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Load {
    pub name: String,
    pub bus: BusId,
    pub phase: Phase,
    pub forecast_p: f64,
    pub forecast_q: f64,
    pub sigma_p: f64,
    pub sigma_q: f64,
    pub has_smart_meter: bool,
    /// Filled in after section derivation.
    pub section: SectionId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapacitorBank {
    pub name: String,
    pub bus: BusId,
    /// Rated kvar per phase (A, B, C); zero means the phase is absent.
    pub rated_q: [f64; 3],
    pub phases: PhaseSet,
}

impl CapacitorBank {
    pub fn rated(&self, p: Phase) -> f64 {
        self.rated_q[p.index()]
    }
}

/// Minimal group of buses/loads isolated together by its boundary switches.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadSection {
    pub id: SectionId,
    pub buses: Vec<BusId>,
    pub loads: Vec<LoadId>,
    /// Switch edges with at least one endpoint in this section.
    pub boundary_switches: Vec<LineId>,
    /// Boundary switches whose closure can energize the section: the far
    /// side can reach a source in the section meta-graph without this
    /// section. Empty for source sections.
    pub supply_switches: Vec<LineId>,
    pub contains_source: bool,
}

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{0}")]
    Semantic(String),
    #[error("topology enumeration exceeded the limit of {0}")]
    EnumerationOverflow(usize),
}

/// A feasible operating point at the discrete level: which switches are
/// closed and which sections are energized.
#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    /// Indexed by switch ordinal (position in `NetworkModel::switches`).
    pub switch_closed: Vec<bool>,
    /// Indexed by section id.
    pub section_energized: Vec<bool>,
}

/// Immutable, validated planning model.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub lines: Vec<LineSegment>,
    pub loads: Vec<Load>,
    pub caps: Vec<CapacitorBank>,
    pub sections: Vec<LoadSection>,
    pub source_buses: Vec<BusId>,
    pub warnings: Vec<String>,
    /// Line ids of switch segments, in line order.
    switches: Vec<LineId>,
    /// (line, phase) pairs in deterministic order; flows are indexed by this.
    line_phases: Vec<(LineId, Phase)>,
    /// (cap, phase) pairs in deterministic order.
    cap_phases: Vec<(CapId, Phase)>,
    /// Section of each bus.
    bus_section: Vec<SectionId>,
    /// Lines incident to each bus.
    adjacency: Vec<Vec<LineId>>,
}

impl NetworkModel {
    pub fn switches(&self) -> &[LineId] {
        &self.switches
    }

    pub fn line_phases(&self) -> &[(LineId, Phase)] {
        &self.line_phases
    }

    pub fn cap_phases(&self) -> &[(CapId, Phase)] {
        &self.cap_phases
    }

    pub fn section_of_bus(&self, bus: BusId) -> SectionId {
        self.bus_section[bus.index()]
    }

    pub fn lines_at(&self, bus: BusId) -> &[LineId] {
        &self.adjacency[bus.index()]
    }

    pub fn switch_ordinal(&self, line: LineId) -> Option<usize> {
        self.switches.iter().position(|&l| l == line)
    }

    pub fn line_phase_ordinal(&self, line: LineId, phase: Phase) -> Option<usize> {
        self.line_phases.iter().position(|&lp| lp == (line, phase))
    }

    pub fn line_by_name(&self, name: &str) -> Option<LineId> {
        self.lines.iter().position(|l| l.name == name).map(LineId)
    }

    pub fn load_by_name(&self, name: &str) -> Option<LoadId> {
        self.loads.iter().position(|l| l.name == name).map(LoadId)
    }

    pub fn bus_by_name(&self, name: &str) -> Option<BusId> {
        self.buses.iter().position(|b| b.name == name).map(BusId)
    }

    pub fn other_end(&self, line: LineId, bus: BusId) -> BusId {
        let l = &self.lines[line.index()];
        if l.from == bus {
            l.to
        } else {
            l.from
        }
    }

    /// Stable fingerprint of the model, for report metadata.
    pub fn fingerprint(&self) -> u64 {
        crate::fnv1a64(self.to_file_string().as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct RawLine<'a> {
    number: usize,
    tokens: Vec<&'a str>,
}

fn syntax(line: usize, msg: impl Into<String>) -> NetworkError {
    NetworkError::Syntax {
        line,
        msg: msg.into(),
    }
}

fn parse_kv<'a>(tok: &'a str, key: &str) -> Option<&'a str> {
    tok.strip_prefix(key)?.strip_prefix('=')
}

fn parse_f64(line: usize, key: &str, text: &str) -> Result<f64, NetworkError> {
    text.parse::<f64>()
        .map_err(|_| syntax(line, format!("invalid number for {key}: '{text}'")))
}

fn dangling(line: usize, name: &str) -> NetworkError {
    NetworkError::Semantic(format!("line {line}: undefined bus '{name}'"))
}

/// Parse and validate a network file (see the file format in the crate docs).
pub fn parse_network(text: &str) -> Result<NetworkModel, NetworkError> {
    let mut buses: Vec<Bus> = Vec::new();
    let mut lines: Vec<LineSegment> = Vec::new();
    let mut loads: Vec<Load> = Vec::new();
    let mut caps: Vec<CapacitorBank> = Vec::new();
    let mut bus_names: HashMap<String, BusId> = HashMap::new();
    let mut line_names: HashMap<String, LineId> = HashMap::new();
    let mut load_names: HashMap<String, LoadId> = HashMap::new();
    let mut cap_names: HashMap<String, CapId> = HashMap::new();

    let raw_lines = text.lines().enumerate().filter_map(|(i, l)| {
        let body = l.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            None
        } else {
            Some(RawLine {
                number: i + 1,
                tokens: body.split_whitespace().collect(),
            })
        }
    });

    for raw in raw_lines {
        let n = raw.number;
        let t = &raw.tokens;
        match t[0] {
            "bus" => {
                if t.len() < 3 {
                    return Err(syntax(n, "bus record needs: bus <id> phases=<ABC> [source]"));
                }
                let name = t[1].to_string();
                let phases_text = parse_kv(t[2], "phases")
                    .ok_or_else(|| syntax(n, "expected phases=<subset of ABC>"))?;
                let phases = PhaseSet::parse(phases_text)
                    .ok_or_else(|| syntax(n, format!("invalid phase set '{phases_text}'")))?;
                let mut is_source = false;
                for extra in &t[3..] {
                    match *extra {
                        "source" => is_source = true,
                        other => return Err(syntax(n, format!("unknown bus flag '{other}'"))),
                    }
                }
                if bus_names.contains_key(&name) {
                    return Err(syntax(n, format!("duplicate bus id '{name}'")));
                }
                bus_names.insert(name.clone(), BusId(buses.len()));
                buses.push(Bus {
                    name,
                    phases,
                    is_source,
                });
            }
            "line" => {
                if t.len() < 5 {
                    return Err(syntax(
                        n,
                        "line record needs: line <id> <from> <to> phases=<...> [switch normal=<open|closed>] [loss=<f>]",
                    ));
                }
                let name = t[1].to_string();
                let from = *bus_names.get(t[2]).ok_or_else(|| dangling(n, t[2]))?;
                let to = *bus_names.get(t[3]).ok_or_else(|| dangling(n, t[3]))?;
                let phases_text = parse_kv(t[4], "phases")
                    .ok_or_else(|| syntax(n, "expected phases=<subset of ABC>"))?;
                let phases = PhaseSet::parse(phases_text)
                    .ok_or_else(|| syntax(n, format!("invalid phase set '{phases_text}'")))?;
                let mut is_switch = false;
                let mut normal_closed = true;
                let mut loss_fraction = 0.0;
                for extra in &t[5..] {
                    if *extra == "switch" {
                        is_switch = true;
                    } else if let Some(v) = parse_kv(extra, "normal") {
                        normal_closed = match v {
                            "open" => false,
                            "closed" => true,
                            _ => return Err(syntax(n, format!("normal must be open|closed, got '{v}'"))),
                        };
                    } else if let Some(v) = parse_kv(extra, "loss") {
                        loss_fraction = parse_f64(n, "loss", v)?;
                    } else {
                        return Err(syntax(n, format!("unknown line flag '{extra}'")));
                    }
                }
                if from == to {
                    return Err(syntax(n, format!("line '{name}' is a self-loop")));
                }
                if !is_switch && !normal_closed {
                    return Err(syntax(n, format!("non-switch line '{name}' cannot be normally open")));
                }
                if !(0.0..1.0).contains(&loss_fraction) {
                    return Err(syntax(n, format!("loss fraction must be in [0,1), got {loss_fraction}")));
                }
                if line_names.contains_key(&name) {
                    return Err(syntax(n, format!("duplicate line id '{name}'")));
                }
                line_names.insert(name.clone(), LineId(lines.len()));
                lines.push(LineSegment {
                    name,
                    from,
                    to,
                    phases,
                    is_switch,
                    normal_closed,
                    loss_fraction,
                });
            }
            "load" => {
                if t.len() < 8 {
                    return Err(syntax(
                        n,
                        "load record needs: load <id> <bus> <phase> p=<kW> q=<kvar> sigp=<kW> sigq=<kvar> [meter]",
                    ));
                }
                let name = t[1].to_string();
                let bus = *bus_names.get(t[2]).ok_or_else(|| dangling(n, t[2]))?;
                let phase = (t[3].len() == 1)
                    .then(|| Phase::from_letter(t[3].chars().next().unwrap()))
                    .flatten()
                    .ok_or_else(|| syntax(n, format!("invalid phase '{}'", t[3])))?;
                let (mut p, mut q, mut sp, mut sq) = (None, None, None, None);
                let mut has_smart_meter = false;
                for extra in &t[4..] {
                    if let Some(v) = parse_kv(extra, "p") {
                        p = Some(parse_f64(n, "p", v)?);
                    } else if let Some(v) = parse_kv(extra, "q") {
                        q = Some(parse_f64(n, "q", v)?);
                    } else if let Some(v) = parse_kv(extra, "sigp") {
                        sp = Some(parse_f64(n, "sigp", v)?);
                    } else if let Some(v) = parse_kv(extra, "sigq") {
                        sq = Some(parse_f64(n, "sigq", v)?);
                    } else if *extra == "meter" {
                        has_smart_meter = true;
                    } else {
                        return Err(syntax(n, format!("unknown load field '{extra}'")));
                    }
                }
                let (forecast_p, forecast_q, sigma_p, sigma_q) = match (p, q, sp, sq) {
                    (Some(p), Some(q), Some(sp), Some(sq)) => (p, q, sp, sq),
                    _ => return Err(syntax(n, "load record requires p=, q=, sigp= and sigq=")),
                };
                if forecast_p < 0.0 {
                    return Err(syntax(n, format!("load '{name}' has negative forecast p")));
                }
                if sigma_p <= 0.0 || sigma_q <= 0.0 {
                    return Err(syntax(n, format!("load '{name}' needs sigp > 0 and sigq > 0")));
                }
                if load_names.contains_key(&name) {
                    return Err(syntax(n, format!("duplicate load id '{name}'")));
                }
                load_names.insert(name.clone(), LoadId(loads.len()));
                loads.push(Load {
                    name,
                    bus,
                    phase,
                    forecast_p,
                    forecast_q,
                    sigma_p,
                    sigma_q,
                    has_smart_meter,
                    section: SectionId(usize::MAX),
                });
            }
            "cap" => {
                if t.len() < 6 {
                    return Err(syntax(n, "cap record needs: cap <id> <bus> qa=<kvar> qb=<kvar> qc=<kvar>"));
                }
                let name = t[1].to_string();
                let bus = *bus_names.get(t[2]).ok_or_else(|| dangling(n, t[2]))?;
                let (mut qa, mut qb, mut qc) = (None, None, None);
                for extra in &t[3..] {
                    if let Some(v) = parse_kv(extra, "qa") {
                        qa = Some(parse_f64(n, "qa", v)?);
                    } else if let Some(v) = parse_kv(extra, "qb") {
                        qb = Some(parse_f64(n, "qb", v)?);
                    } else if let Some(v) = parse_kv(extra, "qc") {
                        qc = Some(parse_f64(n, "qc", v)?);
                    } else {
                        return Err(syntax(n, format!("unknown cap field '{extra}'")));
                    }
                }
                let rated = match (qa, qb, qc) {
                    (Some(a), Some(b), Some(c)) => [a, b, c],
                    _ => return Err(syntax(n, "cap record requires qa=, qb= and qc=")),
                };
                if rated.iter().any(|&v| v < 0.0) {
                    return Err(syntax(n, format!("cap '{name}' has negative rated kvar")));
                }
                let phases = PhaseSet::from_phases(
                    &PHASES
                        .into_iter()
                        .filter(|p| rated[p.index()] > 0.0)
                        .collect::<Vec<_>>(),
                );
                if phases.is_empty() {
                    return Err(syntax(n, format!("cap '{name}' has no phase with positive kvar")));
                }
                if cap_names.contains_key(&name) {
                    return Err(syntax(n, format!("duplicate cap id '{name}'")));
                }
                cap_names.insert(name.clone(), CapId(caps.len()));
                caps.push(CapacitorBank {
                    name,
                    bus,
                    rated_q: rated,
                    phases,
                });
            }
            other => return Err(syntax(n, format!("unknown record type '{other}'"))),
        }
    }

    validate_and_derive(buses, lines, loads, caps)
}

fn validate_and_derive(
    buses: Vec<Bus>,
    lines: Vec<LineSegment>,
    mut loads: Vec<Load>,
    caps: Vec<CapacitorBank>,
) -> Result<NetworkModel, NetworkError> {
    let semantic = |msg: String| NetworkError::Semantic(msg);

    let source_buses: Vec<BusId> = buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.is_source)
        .map(|(i, _)| BusId(i))
        .collect();
    if source_buses.is_empty() {
        return Err(semantic("no source bus declared".into()));
    }

    // Phase-consistency of lines, loads and caps against their buses.
    for l in &lines {
        let fp = buses[l.from.index()].phases;
        let tp = buses[l.to.index()].phases;
        if !l.phases.is_subset_of(fp) || !l.phases.is_subset_of(tp) {
            return Err(semantic(format!(
                "line '{}' carries phases {} not present at both endpoints",
                l.name, l.phases
            )));
        }
    }
    for ld in &loads {
        if !buses[ld.bus.index()].phases.contains(ld.phase) {
            return Err(semantic(format!(
                "load '{}' is on phase {} which is absent at bus '{}'",
                ld.name,
                ld.phase,
                buses[ld.bus.index()].name
            )));
        }
    }
    for c in &caps {
        if !c.phases.is_subset_of(buses[c.bus.index()].phases) {
            return Err(semantic(format!(
                "cap '{}' declares phases {} absent at bus '{}'",
                c.name,
                c.phases,
                buses[c.bus.index()].name
            )));
        }
    }

    // All-switches-closed graph must be connected.
    let mut uf = UnionFind::new(buses.len());
    for l in &lines {
        uf.union(l.from.index(), l.to.index());
    }
    let root0 = uf.find(0);
    if (1..buses.len()).any(|i| uf.find(i) != root0) {
        return Err(semantic("planning graph is not connected with all switches closed".into()));
    }

    // Every simple cycle must contain a switch <=> non-switch edges form a forest.
    let mut uf = UnionFind::new(buses.len());
    for l in &lines {
        if !l.is_switch && !uf.union(l.from.index(), l.to.index()) {
            return Err(semantic(format!(
                "switchless cycle: non-switch line '{}' closes a loop; radiality would be unachievable",
                l.name
            )));
        }
    }

    // Load sections = components of the non-switch subgraph. Deterministic
    // ids: sections ordered by their smallest bus index.
    let mut roots: Vec<usize> = (0..buses.len()).map(|i| uf.find(i)).collect();
    let mut root_to_section: HashMap<usize, SectionId> = HashMap::new();
    let mut sections: Vec<LoadSection> = Vec::new();
    for bus in 0..buses.len() {
        let r = roots[bus];
        let sid = *root_to_section.entry(r).or_insert_with(|| {
            let sid = SectionId(sections.len());
            sections.push(LoadSection {
                id: sid,
                buses: Vec::new(),
                loads: Vec::new(),
                boundary_switches: Vec::new(),
                supply_switches: Vec::new(),
                contains_source: false,
            });
            sid
        });
        roots[bus] = sid.index();
        sections[sid.index()].buses.push(BusId(bus));
        if buses[bus].is_source {
            sections[sid.index()].contains_source = true;
        }
    }
    let bus_section: Vec<SectionId> = roots.iter().map(|&s| SectionId(s)).collect();

    for (i, ld) in loads.iter_mut().enumerate() {
        let sid = bus_section[ld.bus.index()];
        ld.section = sid;
        sections[sid.index()].loads.push(LoadId(i));
    }

    let switches: Vec<LineId> = lines
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_switch)
        .map(|(i, _)| LineId(i))
        .collect();

    for &sw in &switches {
        let l = &lines[sw.index()];
        let sa = bus_section[l.from.index()];
        let sb = bus_section[l.to.index()];
        sections[sa.index()].boundary_switches.push(sw);
        if sb != sa {
            sections[sb.index()].boundary_switches.push(sw);
        }
    }

    // A section containing two source buses can never operate radially
    // (every energized component must contain exactly one source).
    for s in &sections {
        let n_src = s
            .buses
            .iter()
            .filter(|b| buses[b.index()].is_source)
            .count();
        if n_src > 1 {
            return Err(semantic(format!(
                "section containing bus '{}' holds {} source buses; it can never satisfy radiality",
                buses[s.buses[0].index()].name,
                n_src
            )));
        }
    }

    // Supply switches: boundary switch e=(l,m) supplies l iff m can reach a
    // source section in the section meta-graph with l removed.
    let n_sections = sections.len();
    let meta_edges: Vec<(usize, usize, LineId)> = switches
        .iter()
        .map(|&sw| {
            let l = &lines[sw.index()];
            (
                bus_section[l.from.index()].index(),
                bus_section[l.to.index()].index(),
                sw,
            )
        })
        .collect();
    for sec in 0..n_sections {
        if sections[sec].contains_source {
            continue;
        }
        let mut supply = Vec::new();
        for &(a, b, sw) in &meta_edges {
            let far = if a == sec && b != sec {
                b
            } else if b == sec && a != sec {
                a
            } else {
                continue;
            };
            if meta_reaches_source(&sections, &meta_edges, far, sec) {
                supply.push(sw);
            }
        }
        supply.sort();
        supply.dedup();
        sections[sec].supply_switches = supply;
    }

    let mut warnings = Vec::new();
    for s in &sections {
        if s.loads.is_empty() && !s.contains_source {
            warnings.push(format!(
                "section {} (buses starting at '{}') has no loads; it contributes no objective terms",
                s.id.index(),
                buses[s.buses[0].index()].name
            ));
        }
        if !s.contains_source && s.supply_switches.is_empty() {
            return Err(semantic(format!(
                "section {} can never be energized (no supply switches)",
                s.id.index()
            )));
        }
    }
    for ld in &loads {
        let fed = lines.iter().any(|l| {
            (l.from == ld.bus || l.to == ld.bus) && l.phases.contains(ld.phase)
        });
        if !fed {
            warnings.push(format!(
                "load '{}' on phase {} has no incident line carrying that phase",
                ld.name, ld.phase
            ));
        }
    }

    let line_phases: Vec<(LineId, Phase)> = lines
        .iter()
        .enumerate()
        .flat_map(|(i, l)| l.phases.iter().map(move |p| (LineId(i), p)))
        .collect();
    let cap_phases: Vec<(CapId, Phase)> = caps
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.phases.iter().map(move |p| (CapId(i), p)))
        .collect();

    let mut adjacency = vec![Vec::new(); buses.len()];
    for (i, l) in lines.iter().enumerate() {
        adjacency[l.from.index()].push(LineId(i));
        adjacency[l.to.index()].push(LineId(i));
    }

    Ok(NetworkModel {
        buses,
        lines,
        loads,
        caps,
        sections,
        source_buses,
        warnings,
        switches,
        line_phases,
        cap_phases,
        bus_section,
        adjacency,
    })
}

fn meta_reaches_source(
    sections: &[LoadSection],
    meta_edges: &[(usize, usize, LineId)],
    start: usize,
    excluded: usize,
) -> bool {
    if start == excluded {
        return false;
    }
    let mut seen = vec![false; sections.len()];
    let mut stack = vec![start];
    seen[start] = true;
    seen[excluded] = true;
    while let Some(s) = stack.pop() {
        if sections[s].contains_source {
            return true;
        }
        for &(a, b, _) in meta_edges {
            for (u, v) in [(a, b), (b, a)] {
                if u == s && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    false
}

// ---------------------------------------------------------------------------
// Serialization (canonical text form; parse -> serialize -> parse is identity)

impl NetworkModel {
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for b in &self.buses {
            out.push_str(&format!("bus {} phases={}", b.name, b.phases));
            if b.is_source {
                out.push_str(" source");
            }
            out.push('\n');
        }
        for l in &self.lines {
            out.push_str(&format!(
                "line {} {} {} phases={}",
                l.name,
                self.buses[l.from.index()].name,
                self.buses[l.to.index()].name,
                l.phases
            ));
            if l.is_switch {
                out.push_str(&format!(
                    " switch normal={}",
                    if l.normal_closed { "closed" } else { "open" }
                ));
            }
            if l.loss_fraction != 0.0 {
                out.push_str(&format!(" loss={}", l.loss_fraction));
            }
            out.push('\n');
        }
        for ld in &self.loads {
            out.push_str(&format!(
                "load {} {} {} p={} q={} sigp={} sigq={}",
                ld.name,
                self.buses[ld.bus.index()].name,
                ld.phase,
                ld.forecast_p,
                ld.forecast_q,
                ld.sigma_p,
                ld.sigma_q
            ));
            if ld.has_smart_meter {
                out.push_str(" meter");
            }
            out.push('\n');
        }
        for c in &self.caps {
            out.push_str(&format!(
                "cap {} {} qa={} qb={} qc={}\n",
                c.name,
                self.buses[c.bus.index()].name,
                c.rated_q[0],
                c.rated_q[1],
                c.rated_q[2]
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Cycles

impl NetworkModel {
    /// Cycle basis of the all-switches-closed graph: one simple cycle per
    /// non-tree edge of a BFS spanning forest. Count = |E| - |V| + components.
    pub fn fundamental_cycles(&self) -> Vec<Vec<LineId>> {
        let n = self.buses.len();
        let mut parent_edge: Vec<Option<LineId>> = vec![None; n];
        let mut parent_bus: Vec<usize> = (0..n).collect();
        let mut depth = vec![0usize; n];
        let mut visited = vec![false; n];
        let mut tree_edge = vec![false; self.lines.len()];

        for start in 0..n {
            if visited[start] {
                continue;
            }
            visited[start] = true;
            let mut queue = std::collections::VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &line in &self.adjacency[u] {
                    let v = self.other_end(line, BusId(u)).index();
                    if !visited[v] {
                        visited[v] = true;
                        parent_edge[v] = Some(line);
                        parent_bus[v] = u;
                        depth[v] = depth[u] + 1;
                        tree_edge[line.index()] = true;
                        queue.push_back(v);
                    }
                }
            }
        }

        let mut cycles = Vec::new();
        for (i, l) in self.lines.iter().enumerate() {
            if tree_edge[i] {
                continue;
            }
            // Chord + tree path between its endpoints, as a closed walk.
            let (mut a, mut b) = (l.to.index(), l.from.index());
            let mut up_a: Vec<LineId> = Vec::new();
            let mut up_b: Vec<LineId> = Vec::new();
            while depth[a] > depth[b] {
                up_a.push(parent_edge[a].unwrap());
                a = parent_bus[a];
            }
            while depth[b] > depth[a] {
                up_b.push(parent_edge[b].unwrap());
                b = parent_bus[b];
            }
            while a != b {
                up_a.push(parent_edge[a].unwrap());
                a = parent_bus[a];
                up_b.push(parent_edge[b].unwrap());
                b = parent_bus[b];
            }
            let mut cycle = vec![LineId(i)];
            cycle.extend(up_a);
            up_b.reverse();
            cycle.extend(up_b);
            cycles.push(cycle);
        }
        cycles
    }

    /// Simple cycles of the section meta-graph with all source sections
    /// merged into one node, reported as switch-id sets. A closed-switch
    /// assignment is radial (forest, one source per energized component)
    /// iff no such cycle is fully closed.
    pub fn radiality_cycles(&self) -> Vec<Vec<LineId>> {
        // Meta node ids: 0 = merged sources, then non-source sections.
        let mut node_of_section = vec![usize::MAX; self.sections.len()];
        let mut next = 1usize;
        for s in &self.sections {
            node_of_section[s.id.index()] = if s.contains_source {
                0
            } else {
                let id = next;
                next += 1;
                id
            };
        }
        let n_nodes = next;
        let edges: Vec<(usize, usize, LineId)> = self
            .switches
            .iter()
            .map(|&sw| {
                let l = &self.lines[sw.index()];
                (
                    node_of_section[self.bus_section[l.from.index()].index()],
                    node_of_section[self.bus_section[l.to.index()].index()],
                    sw,
                )
            })
            .collect();

        let mut cycles: Vec<Vec<LineId>> = Vec::new();

        // Length-1: switches whose endpoints share a meta node.
        for &(a, b, sw) in &edges {
            if a == b {
                cycles.push(vec![sw]);
            }
        }
        // Length-2: unordered pairs of parallel switches.
        for i in 0..edges.len() {
            for j in i + 1..edges.len() {
                let (a1, b1, s1) = edges[i];
                let (a2, b2, s2) = edges[j];
                if a1 == b1 || a2 == b2 {
                    continue;
                }
                if (a1, b1) == (a2, b2) || (a1, b1) == (b2, a2) {
                    cycles.push(vec![s1, s2]);
                }
            }
        }
        // Length >= 3: simple vertex cycles anchored at their smallest node,
        // one cycle per combination of parallel edges along the way.
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_nodes]; // (neighbor, edge idx)
        for (e, &(a, b, _)) in edges.iter().enumerate() {
            if a != b {
                adj[a].push((b, e));
                adj[b].push((a, e));
            }
        }
        let mut path_nodes: Vec<usize> = Vec::new();
        let mut path_edges: Vec<usize> = Vec::new();
        let mut on_path = vec![false; n_nodes];
        for anchor in 0..n_nodes {
            path_nodes.push(anchor);
            on_path[anchor] = true;
            extend_cycles(
                anchor,
                anchor,
                &adj,
                &edges,
                &mut path_nodes,
                &mut path_edges,
                &mut on_path,
                &mut cycles,
            );
            on_path[anchor] = false;
            path_nodes.pop();
        }
        for c in &mut cycles {
            c.sort();
        }
        cycles.sort();
        cycles.dedup();
        cycles
    }
}

#[allow(clippy::too_many_arguments)]
fn extend_cycles(
    anchor: usize,
    current: usize,
    adj: &[Vec<(usize, usize)>],
    edges: &[(usize, usize, LineId)],
    path_nodes: &mut Vec<usize>,
    path_edges: &mut Vec<usize>,
    on_path: &mut Vec<bool>,
    cycles: &mut Vec<Vec<LineId>>,
) {
    for &(next, e) in &adj[current] {
        if next == anchor && path_nodes.len() >= 3 {
            // Direction dedup: require second node < last node.
            if path_nodes[1] < *path_nodes.last().unwrap() {
                let mut cyc: Vec<LineId> = path_edges.iter().map(|&i| edges[i].2).collect();
                cyc.push(edges[e].2);
                cycles.push(cyc);
            }
        } else if next > anchor && !on_path[next] {
            path_nodes.push(next);
            path_edges.push(e);
            on_path[next] = true;
            extend_cycles(anchor, next, adj, edges, path_nodes, path_edges, on_path, cycles);
            on_path[next] = false;
            path_edges.pop();
            path_nodes.pop();
        }
    }
}

// ---------------------------------------------------------------------------
// Topology feasibility and enumeration

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("closed switches form a cycle")]
    Cycle,
    #[error("an energized component contains more than one source")]
    MultipleSources,
    #[error("section statuses inconsistent with switch statuses")]
    InconsistentSections,
}

impl NetworkModel {
    /// Check a closed-switch assignment for radial feasibility and return the
    /// implied per-section energization. Independent union-find route (used
    /// by the oracle and by estimate validation, not by the MILP itself).
    pub fn section_energization(&self, switch_closed: &[bool]) -> Result<Vec<bool>, TopologyError> {
        assert_eq!(switch_closed.len(), self.switches.len());
        let n = self.sections.len();
        let mut uf = UnionFind::new(n);
        for (k, &sw) in self.switches.iter().enumerate() {
            if !switch_closed[k] {
                continue;
            }
            let l = &self.lines[sw.index()];
            let a = self.bus_section[l.from.index()].index();
            let b = self.bus_section[l.to.index()].index();
            if !uf.union(a, b) {
                return Err(TopologyError::Cycle);
            }
        }
        let mut sources_per_root = vec![0usize; n];
        for s in &self.sections {
            if s.contains_source {
                sources_per_root[uf.find(s.id.index())] += 1;
            }
        }
        if sources_per_root.iter().any(|&c| c > 1) {
            return Err(TopologyError::MultipleSources);
        }
        Ok((0..n).map(|s| sources_per_root[uf.find(s)] == 1).collect())
    }

    /// Enumerate feasible discrete operating points. Intended for oracles and
    /// testing; guarded by `max_count`.
    pub fn enumerate_operational_topologies(
        &self,
        include_outages: bool,
        max_count: usize,
    ) -> Result<Vec<Topology>, NetworkError> {
        let k = self.switches.len();
        if k > 24 {
            return Err(NetworkError::EnumerationOverflow(max_count));
        }
        let mut result = Vec::new();
        for mask in 0u64..(1u64 << k) {
            let closed: Vec<bool> = (0..k).map(|i| mask & (1 << i) != 0).collect();
            let energized = match self.section_energization(&closed) {
                Ok(e) => e,
                Err(_) => continue,
            };
            if !include_outages && energized.iter().any(|&e| !e) {
                continue;
            }
            result.push(Topology {
                switch_closed: closed,
                section_energized: energized,
            });
            if result.len() > max_count {
                return Err(NetworkError::EnumerationOverflow(max_count));
            }
        }
        Ok(result)
    }
}

// ---------------------------------------------------------------------------

pub(crate) struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns false if x and y were already connected.
    pub fn union(&mut self, x: usize, y: usize) -> bool {
        let (rx, ry) = (self.find(x), self.find(y));
        if rx == ry {
            return false;
        }
        self.parent[rx] = ry;
        true
    }
}
