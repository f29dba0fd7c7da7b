use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::network::{NetworkTopology, NodeRef, Species, SpeciesInitialState};
use crate::transport::DiscretizationPlan;

/// Element occupying one location (one state per species).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Element {
    Junction(usize),
    Reservoir(usize),
    Tank(usize),
    Pump(usize),
    Valve(usize),
    /// pipe index, segment index in reference orientation
    Segment(usize, usize),
}

/// Index map of the state vector. Species-major: each species block holds
/// junctions, reservoirs, tanks, pumps, valves, then pipe segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateLayout {
    junctions: usize,
    reservoirs: usize,
    tanks: usize,
    pumps: usize,
    valves: usize,
    pipe_offsets: Vec<usize>,
    segments: Vec<usize>,
    locations: usize,
}

impl StateLayout {
    pub fn new(topo: &NetworkTopology, plan: &DiscretizationPlan) -> Self {
        Self::from_segments(topo, &plan.segments)
    }

    pub fn from_segments(topo: &NetworkTopology, segments: &[usize]) -> Self {
        let junctions = topo.junctions().len();
        let reservoirs = topo.reservoirs().len();
        let tanks = topo.tanks().len();
        let pumps = topo.pumps().len();
        let valves = topo.valves().len();
        let mut offset = junctions + reservoirs + tanks + pumps + valves;
        let mut pipe_offsets = Vec::with_capacity(segments.len());
        for &s in segments {
            pipe_offsets.push(offset);
            offset += s;
        }
        StateLayout {
            junctions,
            reservoirs,
            tanks,
            pumps,
            valves,
            pipe_offsets,
            segments: segments.to_vec(),
            locations: offset,
        }
    }

    /// Locations per species (n_x).
    pub fn locations(&self) -> usize {
        self.locations
    }

    /// Full state dimension, 3·n_x.
    pub fn dim(&self) -> usize {
        3 * self.locations
    }

    pub fn segments(&self, pipe: usize) -> usize {
        self.segments[pipe]
    }

    pub fn index(&self, species: Species, location: usize) -> usize {
        species.index() * self.locations + location
    }

    pub fn junction(&self, i: usize) -> usize {
        i
    }

    pub fn reservoir(&self, i: usize) -> usize {
        self.junctions + i
    }

    pub fn tank(&self, i: usize) -> usize {
        self.junctions + self.reservoirs + i
    }

    pub fn pump(&self, i: usize) -> usize {
        self.junctions + self.reservoirs + self.tanks + i
    }

    pub fn valve(&self, i: usize) -> usize {
        self.junctions + self.reservoirs + self.tanks + self.pumps + i
    }

    pub fn segment(&self, pipe: usize, s: usize) -> usize {
        debug_assert!(s < self.segments[pipe]);
        self.pipe_offsets[pipe] + s
    }

    pub fn node(&self, node: NodeRef) -> usize {
        match node {
            NodeRef::Junction(i) => self.junction(i),
            NodeRef::Reservoir(i) => self.reservoir(i),
            NodeRef::Tank(i) => self.tank(i),
        }
    }

    pub fn element(&self, location: usize) -> Element {
        let mut l = location;
        for (count, make) in [
            (self.junctions, Element::Junction as fn(usize) -> Element),
            (self.reservoirs, Element::Reservoir),
            (self.tanks, Element::Tank),
            (self.pumps, Element::Pump),
            (self.valves, Element::Valve),
        ] {
            if l < count {
                return make(l);
            }
            l -= count;
        }
        let pipe = self.pipe_offsets.partition_point(|&o| o <= location) - 1;
        Element::Segment(pipe, location - self.pipe_offsets[pipe])
    }

    /// Element id for a location; pipe segments read `P1[3]`.
    pub fn label(&self, topo: &NetworkTopology, location: usize) -> String {
        match self.element(location) {
            Element::Junction(i) => topo.junctions()[i].id.clone(),
            Element::Reservoir(i) => topo.reservoirs()[i].id.clone(),
            Element::Tank(i) => topo.tanks()[i].id.clone(),
            Element::Pump(i) => topo.pumps()[i].id.clone(),
            Element::Valve(i) => topo.valves()[i].id.clone(),
            Element::Segment(p, s) => format!("{}[{s}]", topo.pipes()[p].id),
        }
    }

    /// Column header for every state, `species:element`.
    pub fn state_labels(&self, topo: &NetworkTopology) -> Vec<String> {
        let loc: Vec<String> = (0..self.locations).map(|l| self.label(topo, l)).collect();
        Species::ALL
            .iter()
            .flat_map(|s| loc.iter().map(move |l| format!("{}:{l}", s.tag())))
            .collect()
    }

    /// Locations of an element id: one for nodes and links, every segment for a
    /// pipe id, or one segment for `P1[3]`.
    pub fn locations_of(&self, topo: &NetworkTopology, id: &str) -> Option<Vec<usize>> {
        use crate::network::LinkRef;
        if let Some(n) = topo.node(id) {
            return Some(vec![self.node(n)]);
        }
        if let Some((pipe, rest)) = id.split_once('[') {
            let s: usize = rest.strip_suffix(']')?.parse().ok()?;
            return match topo.link(pipe)? {
                LinkRef::Pipe(p) if s < self.segments[p] => Some(vec![self.segment(p, s)]),
                _ => None,
            };
        }
        match topo.link(id)? {
            LinkRef::Pipe(p) => Some((0..self.segments[p]).map(|s| self.segment(p, s)).collect()),
            LinkRef::Pump(i) => Some(vec![self.pump(i)]),
            LinkRef::Valve(i) => Some(vec![self.valve(i)]),
        }
    }

    /// Water volume represented by each location (segment or tank), used for
    /// mass accounting. Zero for junctions, reservoirs and links.
    pub fn location_volumes(&self, topo: &NetworkTopology, tank_volumes: &[f64]) -> Vec<f64> {
        let mut v = vec![0.0; self.locations];
        for (t, vol) in tank_volumes.iter().enumerate() {
            v[self.tank(t)] = *vol;
        }
        for (p, pipe) in topo.pipes().iter().enumerate() {
            let seg = pipe.volume() / self.segments[p] as f64;
            for s in 0..self.segments[p] {
                v[self.segment(p, s)] = seg;
            }
        }
        v
    }

    /// Initial state vector. Reservoirs take their source concentration.
    pub fn initial_state(
        &self,
        topo: &NetworkTopology,
        init: &SpeciesInitialState,
    ) -> Result<DVector<f64>> {
        let mut x = DVector::zeros(self.dim());
        for species in Species::ALL {
            let base = species.index() * self.locations;
            for (i, j) in topo.junctions().iter().enumerate() {
                x[base + self.junction(i)] = init.node_value(species, &j.id)?;
            }
            for (i, r) in topo.reservoirs().iter().enumerate() {
                x[base + self.reservoir(i)] = r.concentration(species);
            }
            for (i, t) in topo.tanks().iter().enumerate() {
                x[base + self.tank(i)] = init.node_value(species, &t.id)?;
            }
            for (i, m) in topo.pumps().iter().enumerate() {
                x[base + self.pump(i)] = init.node_value(species, &m.id)?;
            }
            for (i, m) in topo.valves().iter().enumerate() {
                x[base + self.valve(i)] = init.node_value(species, &m.id)?;
            }
            for (p, pipe) in topo.pipes().iter().enumerate() {
                let values = init.pipe_values(species, &pipe.id, self.segments[p])?;
                for (s, v) in values.into_iter().enumerate() {
                    x[base + self.segment(p, s)] = v;
                }
            }
        }
        if let Some(i) = x.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Validation(format!(
                "initial state {} is negative or not finite",
                self.state_labels(topo)[i]
            )));
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo() -> NetworkTopology {
        NetworkTopology::from_toml(
            r#"
[[reservoirs]]
id = "R1"
[[junctions]]
id = "J1"
[[junctions]]
id = "J2"
[[pumps]]
id = "M1"
from = "R1"
to = "J1"
[[pipes]]
id = "P1"
from = "J1"
to = "J2"
length = 10.0
diameter = 0.1
diffusivity = 1e-9
[[pipes]]
id = "P2"
from = "J2"
to = "J1"
length = 10.0
diameter = 0.1
diffusivity = 1e-9
"#,
            "inline",
        )
        .unwrap()
    }

    #[test]
    fn layout_is_a_bijection() {
        let t = topo();
        let layout = StateLayout::from_segments(&t, &[3, 2]);
        assert_eq!(layout.locations(), 2 + 1 + 1 + 5);
        assert_eq!(layout.dim(), 27);
        let labels = layout.state_labels(&t);
        let unique: std::collections::HashSet<_> = labels.iter().collect();
        assert_eq!(unique.len(), labels.len());
        for l in 0..layout.locations() {
            let back = match layout.element(l) {
                Element::Junction(i) => layout.junction(i),
                Element::Reservoir(i) => layout.reservoir(i),
                Element::Tank(i) => layout.tank(i),
                Element::Pump(i) => layout.pump(i),
                Element::Valve(i) => layout.valve(i),
                Element::Segment(p, s) => layout.segment(p, s),
            };
            assert_eq!(back, l);
        }
        assert_eq!(
            labels[layout.index(Species::Thms, layout.segment(1, 1))],
            "thms:P2[1]"
        );
        assert_eq!(layout.locations_of(&t, "P1").unwrap().len(), 3);
        assert_eq!(
            layout.locations_of(&t, "P2[1]").unwrap(),
            vec![layout.segment(1, 1)]
        );
    }
}
