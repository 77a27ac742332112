//! MIG slot geometry for a seven-GPC GPU.
//!
//! A GPU exposes seven compute slots (0-6). Each instance size may start only
//! at particular slots, and a size-3 instance at slot 0 additionally makes
//! slot 3 unusable. Start slots are returned in placement-preference order so
//! that first-fit keeps the layouts that large segments need available.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::configurator::Triplet;

/// Number of compute slots (GPCs) on one GPU.
pub const NUM_SLOTS: usize = 7;

/// GPC count of a MIG instance. Only 1, 2, 3, 4 and 7 exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct InstanceSize(u8);

impl InstanceSize {
    pub const ONE: InstanceSize = InstanceSize(1);
    pub const TWO: InstanceSize = InstanceSize(2);
    pub const THREE: InstanceSize = InstanceSize(3);
    pub const FOUR: InstanceSize = InstanceSize(4);
    pub const SEVEN: InstanceSize = InstanceSize(7);

    /// All sizes, ascending.
    pub const ALL: [InstanceSize; 5] = [
        InstanceSize::ONE,
        InstanceSize::TWO,
        InstanceSize::THREE,
        InstanceSize::FOUR,
        InstanceSize::SEVEN,
    ];

    pub fn new(gpcs: u32) -> Result<Self, MigError> {
        match gpcs {
            1 | 2 | 3 | 4 | 7 => Ok(InstanceSize(gpcs as u8)),
            other => Err(MigError::InvalidSize(other)),
        }
    }

    pub fn gpcs(self) -> u8 {
        self.0
    }

    /// Position in [`InstanceSize::ALL`].
    pub fn index(self) -> usize {
        match self.0 {
            1 => 0,
            2 => 1,
            3 => 2,
            4 => 3,
            _ => 4,
        }
    }
}

impl TryFrom<u8> for InstanceSize {
    type Error = MigError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        InstanceSize::new(u32::from(value))
    }
}

impl From<InstanceSize> for u8 {
    fn from(size: InstanceSize) -> u8 {
        size.0
    }
}

impl fmt::Display for InstanceSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MigError {
    #[error("invalid instance size {0}: MIG instances are 1, 2, 3, 4 or 7 GPCs")]
    InvalidSize(u32),
    #[error("size-{size} segment cannot start at slot {slot}")]
    InvalidStart { size: u8, slot: u8 },
    #[error("slots for a size-{size} segment at slot {slot} on GPU {gpu} are not free")]
    Conflict { gpu: u32, size: u8, slot: u8 },
    #[error("no segment starts at slot {slot} on GPU {gpu}")]
    NotFound { gpu: u32, slot: u8 },
}

/// Cells a segment takes when it starts at `start`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Footprint {
    pub start: u8,
    pub occupied: Range<u8>,
    /// Extra cell made unusable by this placement.
    pub blocked: Option<u8>,
}

impl Footprint {
    fn new(start: u8, len: u8, blocked: Option<u8>) -> Self {
        Footprint {
            start,
            occupied: start..start + len,
            blocked,
        }
    }

    fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.occupied.clone().chain(self.blocked).map(usize::from)
    }
}

/// Start-slot rules. The default reproduces the 19 A100 configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Geometry {
    size2_at_slot5: bool,
}

impl Geometry {
    pub const fn a100() -> Self {
        Geometry {
            size2_at_slot5: false,
        }
    }

    /// Also lets size-2 segments start at slot 5. This admits six layouts
    /// (a size-1 at slot 4 followed by a size-2 at 5-6) that real hardware
    /// does not offer, for 25 full configurations instead of 19.
    pub const fn with_size2_at_slot5() -> Self {
        Geometry {
            size2_at_slot5: true,
        }
    }

    /// Preference-ordered start slots and footprints for `size`.
    pub fn allowed_start_slots(&self, size: InstanceSize) -> Vec<Footprint> {
        self.footprints(size).collect()
    }

    /// Same as [`Geometry::allowed_start_slots`] without allocating.
    pub fn footprints(&self, size: InstanceSize) -> impl Iterator<Item = Footprint> {
        const TWOS: [u8; 4] = [0, 2, 4, 5];
        let (starts, len): (&[u8], u8) = match size.gpcs() {
            7 => (&[0], 7),
            4 => (&[0], 4),
            3 => (&[4, 0], 3),
            2 if self.size2_at_slot5 => (&TWOS, 2),
            2 => (&TWOS[..3], 2),
            _ => (&[0, 1, 2, 3, 4, 5, 6], 1),
        };
        starts.iter().map(move |&s| {
            let blocked = (len == 3 && s == 0).then_some(3);
            Footprint::new(s, len, blocked)
        })
    }
}

/// Preference-ordered start slots for a raw GPC count under the default geometry.
pub fn allowed_start_slots(gpcs: u32) -> Result<Vec<Footprint>, MigError> {
    let size = InstanceSize::new(gpcs)?;
    Ok(Geometry::a100().allowed_start_slots(size))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Cell {
    #[default]
    Free,
    /// Part of the segment starting at `start`.
    Occupied { start: u8 },
    /// Unusable because of the segment starting at `start`.
    Blocked { start: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SlotMap {
    cells: [Cell; NUM_SLOTS],
}

impl SlotMap {
    pub fn cells(&self) -> &[Cell; NUM_SLOTS] {
        &self.cells
    }

    pub fn is_free(&self, footprint: &Footprint) -> bool {
        footprint.cells().all(|c| self.cells[c] == Cell::Free)
    }

    fn fill(&mut self, footprint: &Footprint) {
        for c in footprint.occupied.clone() {
            self.cells[usize::from(c)] = Cell::Occupied {
                start: footprint.start,
            };
        }
        if let Some(b) = footprint.blocked {
            self.cells[usize::from(b)] = Cell::Blocked {
                start: footprint.start,
            };
        }
    }

    fn clear(&mut self, start: u8) {
        for cell in self.cells.iter_mut() {
            match *cell {
                Cell::Occupied { start: s } | Cell::Blocked { start: s } if s == start => {
                    *cell = Cell::Free;
                }
                _ => {}
            }
        }
    }

    pub fn blocked_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c, Cell::Blocked { .. }))
            .count()
    }
}

/// A segment bound to a slot range on one GPU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedSegment {
    pub service: String,
    pub triplet: Triplet,
    pub start_slot: u8,
}

impl PlacedSegment {
    pub fn size(&self) -> InstanceSize {
        self.triplet.instance_size
    }
}

/// One GPU: its placed segments and slot occupancy.
#[derive(Debug, Clone, PartialEq)]
pub struct GpuState {
    pub id: u32,
    num_gpcs: u8,
    segments: Vec<PlacedSegment>,
    slot_map: SlotMap,
}

impl GpuState {
    pub fn new(id: u32) -> Self {
        GpuState {
            id,
            num_gpcs: 0,
            segments: Vec::new(),
            slot_map: SlotMap::default(),
        }
    }

    pub fn num_gpcs(&self) -> u8 {
        self.num_gpcs
    }

    pub fn free_gpcs(&self) -> u8 {
        NUM_SLOTS as u8 - self.num_gpcs
    }

    /// Placed segments in placement order.
    pub fn segments(&self) -> &[PlacedSegment] {
        &self.segments
    }

    pub fn slot_map(&self) -> &SlotMap {
        &self.slot_map
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// The first preferred footprint for `size` that is entirely free.
    pub fn find_slot(&self, size: InstanceSize, geometry: &Geometry) -> Option<Footprint> {
        geometry
            .footprints(size)
            .find(|fp| self.slot_map.is_free(fp))
    }

    /// Places the segment at its first free preferred start slot. Returns the
    /// start slot, or `None` (leaving the GPU untouched) if nothing fits.
    pub fn try_place(
        &mut self,
        service: &str,
        triplet: Triplet,
        geometry: &Geometry,
    ) -> Option<u8> {
        let fp = self.find_slot(triplet.instance_size, geometry)?;
        self.occupy(service, triplet, &fp);
        Some(fp.start)
    }

    /// Places the segment at an explicit start slot.
    pub fn place_at(
        &mut self,
        service: &str,
        triplet: Triplet,
        start: u8,
        geometry: &Geometry,
    ) -> Result<(), MigError> {
        let size = triplet.instance_size;
        let fp = geometry
            .footprints(size)
            .find(|fp| fp.start == start)
            .ok_or(MigError::InvalidStart {
                size: size.gpcs(),
                slot: start,
            })?;
        if !self.slot_map.is_free(&fp) {
            return Err(MigError::Conflict {
                gpu: self.id,
                size: size.gpcs(),
                slot: start,
            });
        }
        self.occupy(service, triplet, &fp);
        Ok(())
    }

    fn occupy(&mut self, service: &str, triplet: Triplet, fp: &Footprint) {
        self.slot_map.fill(fp);
        self.num_gpcs += triplet.instance_size.gpcs();
        self.segments.push(PlacedSegment {
            service: service.to_owned(),
            triplet,
            start_slot: fp.start,
        });
    }

    /// Frees the segment starting at `start`, including any blocked cell.
    pub fn remove(&mut self, start: u8) -> Result<PlacedSegment, MigError> {
        let pos = self
            .segments
            .iter()
            .position(|s| s.start_slot == start)
            .ok_or(MigError::NotFound {
                gpu: self.id,
                slot: start,
            })?;
        let seg = self.segments.remove(pos);
        self.slot_map.clear(start);
        self.num_gpcs -= seg.size().gpcs();
        Ok(seg)
    }

    /// Updates the recorded batch latency of the segment at `start`.
    pub fn set_latency(&mut self, start: u8, latency_ms: f64) -> bool {
        match self.segments.iter_mut().find(|s| s.start_slot == start) {
            Some(seg) => {
                seg.triplet.latency_ms = latency_ms;
                true
            }
            None => false,
        }
    }

    /// (start slot, size) pairs sorted by start slot.
    pub fn layout(&self) -> Vec<(u8, InstanceSize)> {
        let mut layout: Vec<_> = self
            .segments
            .iter()
            .map(|s| (s.start_slot, s.size()))
            .collect();
        layout.sort();
        layout
    }
}

/// A maximal slot arrangement: no further segment of any size fits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FullConfig {
    /// (start slot, size), sorted by start slot.
    pub placements: Vec<(u8, InstanceSize)>,
}

impl FullConfig {
    pub fn contains_layout(&self, layout: &[(u8, InstanceSize)]) -> bool {
        layout.iter().all(|p| self.placements.contains(p))
    }
}

impl fmt::Display for FullConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self
            .placements
            .iter()
            .map(|(_, size)| size.to_string())
            .collect();
        write!(f, "{}", names.join("-"))
    }
}

/// Exhaustively explores every placement sequence from an empty GPU and
/// collects the distinct maximal arrangements.
pub fn enumerate_full_configs(geometry: &Geometry) -> BTreeSet<FullConfig> {
    fn explore(
        map: &SlotMap,
        placed: &mut Vec<(u8, InstanceSize)>,
        geometry: &Geometry,
        seen: &mut HashSet<SlotMap>,
        out: &mut BTreeSet<FullConfig>,
    ) {
        if !seen.insert(map.clone()) {
            return;
        }
        let mut extended = false;
        for size in InstanceSize::ALL.iter().rev() {
            for fp in geometry.allowed_start_slots(*size) {
                if map.is_free(&fp) {
                    extended = true;
                    let mut next = map.clone();
                    next.fill(&fp);
                    placed.push((fp.start, *size));
                    explore(&next, placed, geometry, seen, out);
                    placed.pop();
                }
            }
        }
        if !extended {
            let mut placements = placed.clone();
            placements.sort();
            out.insert(FullConfig { placements });
        }
    }

    let mut out = BTreeSet::new();
    let mut seen = HashSet::new();
    explore(
        &SlotMap::default(),
        &mut Vec::new(),
        geometry,
        &mut seen,
        &mut out,
    );
    out
}

/// True if the GPU's arrangement can be completed into one of `configs`.
pub fn is_prefix_valid(gpu: &GpuState, configs: &BTreeSet<FullConfig>) -> bool {
    let layout = gpu.layout();
    configs.iter().any(|c| c.contains_layout(&layout))
}
