use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chemical species tracked per location. The ordering is also the block order of
/// the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Chlorine,
    Reactant,
    Thms,
}

impl Species {
    pub const ALL: [Species; 3] = [Species::Chlorine, Species::Reactant, Species::Thms];

    pub fn index(self) -> usize {
        match self {
            Species::Chlorine => 0,
            Species::Reactant => 1,
            Species::Thms => 2,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Species::Chlorine => "chlorine",
            Species::Reactant => "reactant",
            Species::Thms => "thms",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
}

/// Fixed-concentration source node (mg/L per species).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReservoirSpec {
    pub id: String,
    #[serde(default)]
    pub chlorine: f64,
    #[serde(default)]
    pub reactant: f64,
    #[serde(default)]
    pub thms: f64,
}

impl ReservoirSpec {
    pub fn concentration(&self, species: Species) -> f64 {
        match species {
            Species::Chlorine => self.chlorine,
            Species::Reactant => self.reactant,
            Species::Thms => self.thms,
        }
    }
}

/// Completely mixed storage tank. Volumes in m³, bulk rate in 1/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TankSpec {
    pub id: String,
    pub min_volume: f64,
    pub max_volume: f64,
    pub initial_volume: f64,
    #[serde(default)]
    pub bulk_rate: f64,
}

/// Pipe with physical and wall/bulk reaction parameters (SI units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipeSpec {
    pub id: String,
    pub from: String,
    pub to: String,
    /// m
    pub length: f64,
    /// m
    pub diameter: f64,
    /// 1/s
    #[serde(default)]
    pub bulk_rate: f64,
    /// 1/s
    #[serde(default)]
    pub wall_rate: f64,
    /// mass-transfer coefficient between bulk flow and wall
    #[serde(default)]
    pub mass_transfer: f64,
    /// molecular diffusivity, m²/s
    pub diffusivity: f64,
}

impl PipeSpec {
    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.diameter * self.diameter / 4.0
    }

    pub fn volume(&self) -> f64 {
        self.area() * self.length
    }
}

/// Zero-length link (pump or valve).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: String,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoosterSpec {
    pub id: String,
    /// Host junction or tank id.
    pub node: String,
    /// Upper bound on the injected concentration, mg/L.
    pub max_concentration: f64,
    #[serde(default = "default_booster_species")]
    pub species: Species,
}

fn default_booster_species() -> Species {
    Species::Chlorine
}

/// Reference to a node by kind and index into the corresponding list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeRef {
    Junction(usize),
    Reservoir(usize),
    Tank(usize),
}

/// Reference to a link by kind and index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkRef {
    Pipe(usize),
    Pump(usize),
    Valve(usize),
}

/// On-disk layout of a network file. Every section is optional so that small
/// networks stay short.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub junctions: Vec<NodeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reservoirs: Vec<ReservoirSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tanks: Vec<TankSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pipes: Vec<PipeSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pumps: Vec<LinkSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub valves: Vec<LinkSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boosters: Vec<BoosterSpec>,
}

/// Validated network graph. Construct through [`NetworkTopology::new`] or
/// [`load_network`]; fields are read-only after validation.
#[derive(Debug, Clone)]
pub struct NetworkTopology {
    junctions: Vec<NodeSpec>,
    reservoirs: Vec<ReservoirSpec>,
    tanks: Vec<TankSpec>,
    pipes: Vec<PipeSpec>,
    pumps: Vec<LinkSpec>,
    valves: Vec<LinkSpec>,
    boosters: Vec<BoosterSpec>,
    nodes: HashMap<String, NodeRef>,
    links: HashMap<String, LinkRef>,
    /// per link kind: resolved (from, to) node refs
    pipe_ends: Vec<(NodeRef, NodeRef)>,
    pump_ends: Vec<(NodeRef, NodeRef)>,
    valve_ends: Vec<(NodeRef, NodeRef)>,
    booster_hosts: Vec<NodeRef>,
}

impl PartialEq for NetworkTopology {
    fn eq(&self, other: &Self) -> bool {
        self.junctions == other.junctions
            && self.reservoirs == other.reservoirs
            && self.tanks == other.tanks
            && self.pipes == other.pipes
            && self.pumps == other.pumps
            && self.valves == other.valves
            && self.boosters == other.boosters
    }
}

impl NetworkTopology {
    /// Validates the raw sections and resolves all id references. Errors name the
    /// first violated invariant.
    pub fn new(file: NetworkFile) -> Result<Self> {
        if let Some(first) = check_network(&file).into_iter().next() {
            return Err(Error::Validation(first));
        }
        let NetworkFile {
            junctions,
            reservoirs,
            tanks,
            pipes,
            pumps,
            valves,
            boosters,
        } = file;

        let mut nodes = HashMap::new();
        for (i, j) in junctions.iter().enumerate() {
            nodes.insert(j.id.clone(), NodeRef::Junction(i));
        }
        for (i, r) in reservoirs.iter().enumerate() {
            nodes.insert(r.id.clone(), NodeRef::Reservoir(i));
        }
        for (i, t) in tanks.iter().enumerate() {
            nodes.insert(t.id.clone(), NodeRef::Tank(i));
        }
        let mut links = HashMap::new();
        for (i, p) in pipes.iter().enumerate() {
            links.insert(p.id.clone(), LinkRef::Pipe(i));
        }
        for (i, m) in pumps.iter().enumerate() {
            links.insert(m.id.clone(), LinkRef::Pump(i));
        }
        for (i, v) in valves.iter().enumerate() {
            links.insert(v.id.clone(), LinkRef::Valve(i));
        }
        let ends = |from: &str, to: &str| (nodes[from], nodes[to]);
        let pipe_ends = pipes.iter().map(|p| ends(&p.from, &p.to)).collect();
        let pump_ends = pumps.iter().map(|p| ends(&p.from, &p.to)).collect();
        let valve_ends = valves.iter().map(|p| ends(&p.from, &p.to)).collect();
        let booster_hosts = boosters.iter().map(|b| nodes[&b.node]).collect();

        Ok(NetworkTopology {
            junctions,
            reservoirs,
            tanks,
            pipes,
            pumps,
            valves,
            boosters,
            nodes,
            links,
            pipe_ends,
            pump_ends,
            valve_ends,
            booster_hosts,
        })
    }

    /// Dense ordinal over all nodes: junctions, reservoirs, tanks.
    pub fn node_ordinal(&self, r: NodeRef) -> usize {
        match r {
            NodeRef::Junction(i) => i,
            NodeRef::Reservoir(i) => self.junctions.len() + i,
            NodeRef::Tank(i) => self.junctions.len() + self.reservoirs.len() + i,
        }
    }

    pub fn node_from_ordinal(&self, k: usize) -> NodeRef {
        let nj = self.junctions.len();
        let nr = self.reservoirs.len();
        if k < nj {
            NodeRef::Junction(k)
        } else if k < nj + nr {
            NodeRef::Reservoir(k - nj)
        } else {
            NodeRef::Tank(k - nj - nr)
        }
    }

    pub fn junctions(&self) -> &[NodeSpec] {
        &self.junctions
    }
    pub fn reservoirs(&self) -> &[ReservoirSpec] {
        &self.reservoirs
    }
    pub fn tanks(&self) -> &[TankSpec] {
        &self.tanks
    }
    pub fn pipes(&self) -> &[PipeSpec] {
        &self.pipes
    }
    pub fn pumps(&self) -> &[LinkSpec] {
        &self.pumps
    }
    pub fn valves(&self) -> &[LinkSpec] {
        &self.valves
    }
    pub fn boosters(&self) -> &[BoosterSpec] {
        &self.boosters
    }

    /// n_N = n_R + n_J + n_TK
    pub fn node_count(&self) -> usize {
        self.junctions.len() + self.reservoirs.len() + self.tanks.len()
    }

    pub fn node(&self, id: &str) -> Option<NodeRef> {
        self.nodes.get(id).copied()
    }

    pub fn link(&self, id: &str) -> Option<LinkRef> {
        self.links.get(id).copied()
    }

    pub fn node_id(&self, r: NodeRef) -> &str {
        match r {
            NodeRef::Junction(i) => &self.junctions[i].id,
            NodeRef::Reservoir(i) => &self.reservoirs[i].id,
            NodeRef::Tank(i) => &self.tanks[i].id,
        }
    }

    pub fn link_id(&self, r: LinkRef) -> &str {
        match r {
            LinkRef::Pipe(i) => &self.pipes[i].id,
            LinkRef::Pump(i) => &self.pumps[i].id,
            LinkRef::Valve(i) => &self.valves[i].id,
        }
    }

    /// (from, to) in the link's reference orientation.
    pub fn link_ends_of(&self, r: LinkRef) -> (NodeRef, NodeRef) {
        match r {
            LinkRef::Pipe(i) => self.pipe_ends[i],
            LinkRef::Pump(i) => self.pump_ends[i],
            LinkRef::Valve(i) => self.valve_ends[i],
        }
    }

    pub fn pipe_ends(&self, i: usize) -> (NodeRef, NodeRef) {
        self.pipe_ends[i]
    }

    pub fn booster_host(&self, b: usize) -> NodeRef {
        self.booster_hosts[b]
    }

    /// All links in kind order: pipes, pumps, valves.
    pub fn all_links(&self) -> impl Iterator<Item = LinkRef> + '_ {
        (0..self.pipes.len())
            .map(LinkRef::Pipe)
            .chain((0..self.pumps.len()).map(LinkRef::Pump))
            .chain((0..self.valves.len()).map(LinkRef::Valve))
    }

    /// Links attached to each node (by node ordinal).
    pub fn incidence(&self) -> Vec<Vec<LinkRef>> {
        let mut inc = vec![Vec::new(); self.node_count()];
        for l in self.all_links() {
            let (a, b) = self.link_ends_of(l);
            inc[self.node_ordinal(a)].push(l);
            inc[self.node_ordinal(b)].push(l);
        }
        inc
    }

    /// Boosters hosted at each node (by node ordinal).
    pub fn boosters_at(&self) -> Vec<Vec<usize>> {
        let mut at = vec![Vec::new(); self.node_count()];
        for (b, host) in self.booster_hosts.iter().enumerate() {
            at[self.node_ordinal(*host)].push(b);
        }
        at
    }

    pub fn to_file(&self) -> NetworkFile {
        NetworkFile {
            junctions: self.junctions.clone(),
            reservoirs: self.reservoirs.clone(),
            tanks: self.tanks.clone(),
            pipes: self.pipes.clone(),
            pumps: self.pumps.clone(),
            valves: self.valves.clone(),
            boosters: self.boosters.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.to_file()).expect("network sections serialize")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let file: NetworkFile = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
        NetworkTopology::new(file)
    }

    /// Component counts keyed by kind, used in reports.
    pub fn counts(&self) -> BTreeMap<&'static str, usize> {
        BTreeMap::from([
            ("junctions", self.junctions.len()),
            ("reservoirs", self.reservoirs.len()),
            ("tanks", self.tanks.len()),
            ("pipes", self.pipes.len()),
            ("pumps", self.pumps.len()),
            ("valves", self.valves.len()),
            ("boosters", self.boosters.len()),
        ])
    }
}

/// Lists every violated topology invariant, in file order. An empty list means
/// [`NetworkTopology::new`] will succeed.
pub fn check_network(file: &NetworkFile) -> Vec<String> {
    let mut out = Vec::new();
    let mut nodes: HashMap<&str, usize> = HashMap::new();
    let mut node_ids: Vec<&str> = Vec::new();
    let ids = file
        .junctions
        .iter()
        .map(|j| j.id.as_str())
        .chain(file.reservoirs.iter().map(|r| r.id.as_str()))
        .chain(file.tanks.iter().map(|t| t.id.as_str()));
    for id in ids {
        if id.is_empty() {
            out.push("node with empty id".into());
        } else if nodes.contains_key(id) {
            out.push(format!("duplicate node id '{id}'"));
        } else {
            nodes.insert(id, node_ids.len());
            node_ids.push(id);
        }
    }
    if node_ids.is_empty() {
        out.push("network has no nodes".into());
    }

    for r in &file.reservoirs {
        for s in Species::ALL {
            let c = r.concentration(s);
            if !(c >= 0.0 && c.is_finite()) {
                out.push(format!(
                    "reservoir '{}' has invalid {} concentration {c}",
                    r.id,
                    s.tag()
                ));
            }
        }
    }
    for t in &file.tanks {
        if !(t.min_volume > 0.0
            && t.min_volume <= t.initial_volume
            && t.initial_volume <= t.max_volume)
        {
            out.push(format!(
                "tank '{}' violates 0 < Vmin <= V0 <= Vmax ({} / {} / {})",
                t.id, t.min_volume, t.initial_volume, t.max_volume
            ));
        }
        if !(t.bulk_rate >= 0.0) {
            out.push(format!("tank '{}' has a negative bulk rate", t.id));
        }
    }

    let mut link_ids = std::collections::HashSet::new();
    let mut edges = Vec::new();
    let mut link = |id: &str, from: &str, to: &str, out: &mut Vec<String>| {
        if id.is_empty() {
            out.push("link with empty id".into());
        } else if nodes.contains_key(id) || !link_ids.insert(id.to_string()) {
            out.push(format!("duplicate element id '{id}'"));
        }
        let a = nodes.get(from).copied();
        let b = nodes.get(to).copied();
        if a.is_none() {
            out.push(format!("link '{id}' references missing node '{from}'"));
        }
        if b.is_none() {
            out.push(format!("link '{id}' references missing node '{to}'"));
        }
        if let (Some(a), Some(b)) = (a, b) {
            if a == b {
                out.push(format!("link '{id}' is a self-loop"));
            }
            edges.push((a, b));
        }
    };
    for p in &file.pipes {
        link(&p.id, &p.from, &p.to, &mut out);
        if !(p.length > 0.0 && p.length.is_finite()) {
            out.push(format!("pipe '{}' must have positive length", p.id));
        }
        if !(p.diameter > 0.0 && p.diameter.is_finite()) {
            out.push(format!("pipe '{}' must have positive diameter", p.id));
        }
        if !(p.diffusivity > 0.0 && p.diffusivity.is_finite()) {
            out.push(format!(
                "pipe '{}' must have positive molecular diffusivity",
                p.id
            ));
        }
        if !(p.bulk_rate >= 0.0 && p.wall_rate >= 0.0 && p.mass_transfer >= 0.0) {
            out.push(format!("pipe '{}' has a negative reaction rate", p.id));
        }
    }
    for m in file.pumps.iter().chain(&file.valves) {
        link(&m.id, &m.from, &m.to, &mut out);
    }

    let mut booster_ids = std::collections::HashSet::new();
    for b in &file.boosters {
        if !booster_ids.insert(b.id.as_str()) {
            out.push(format!("duplicate booster id '{}'", b.id));
        }
        match nodes.get(b.node.as_str()) {
            None => out.push(format!(
                "booster '{}' references missing host node '{}'",
                b.id, b.node
            )),
            Some(_) if file.reservoirs.iter().any(|r| r.id == b.node) => out.push(format!(
                "booster '{}' must be hosted by a junction or tank",
                b.id
            )),
            Some(_) => {}
        }
        if !(b.max_concentration > 0.0 && b.max_concentration.is_finite()) {
            out.push(format!(
                "booster '{}' must have a positive maximum concentration",
                b.id
            ));
        }
    }

    if !node_ids.is_empty() {
        let n = node_ids.len();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(k) = queue.pop_front() {
            for &m in &adj[k] {
                if !seen[m] {
                    seen[m] = true;
                    queue.push_back(m);
                }
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            out.push(format!(
                "network is not connected: node '{}' is unreachable",
                node_ids[k]
            ));
        }
    }
    out
}

/// Reads and validates a network file.
pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkTopology> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    NetworkTopology::from_toml(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[[reservoirs]]
id = "R1"
chlorine = 2.0

[[junctions]]
id = "J1"

[[pipes]]
id = "P1"
from = "R1"
to = "J1"
length = 100.0
diameter = 0.2
diffusivity = 1.21e-9
"#;

    #[test]
    fn minimal_network_counts() {
        let topo = NetworkTopology::from_toml(MINIMAL, "inline").unwrap();
        assert_eq!(topo.node_count(), 2);
        assert_eq!(topo.pipes().len(), 1);
        assert_eq!(topo.node("R1"), Some(NodeRef::Reservoir(0)));
    }

    #[test]
    fn missing_node_is_named() {
        let text = MINIMAL.replace("to = \"J1\"", "to = \"J9\"");
        let err = NetworkTopology::from_toml(&text, "inline").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("P1") && msg.contains("J9"), "{msg}");
    }

    #[test]
    fn disconnected_graph_rejected() {
        let text = format!("{MINIMAL}\n[[junctions]]\nid = \"J2\"\n");
        let err = NetworkTopology::from_toml(&text, "inline").unwrap_err();
        assert!(err.to_string().contains("J2"));
    }

    #[test]
    fn nonpositive_geometry_rejected() {
        let text = MINIMAL.replace("diameter = 0.2", "diameter = 0.0");
        assert!(NetworkTopology::from_toml(&text, "inline").is_err());
        let text = MINIMAL.replace("length = 100.0", "length = -1.0");
        assert!(NetworkTopology::from_toml(&text, "inline").is_err());
    }

    #[test]
    fn booster_on_missing_node_rejected() {
        let text = format!(
            "{MINIMAL}\n[[boosters]]\nid = \"B1\"\nnode = \"J7\"\nmax_concentration = 4.0\n"
        );
        let err = NetworkTopology::from_toml(&text, "inline").unwrap_err();
        assert!(err.to_string().contains("B1"));
    }

    #[test]
    fn malformed_file_is_parse_error() {
        let err = NetworkTopology::from_toml("[[pipes]\nid=", "inline").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }
}
