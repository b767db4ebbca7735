//! Cityscapes semantic class ids.

pub type ClassId = u8;

pub const ROAD: ClassId = 0;
pub const SIDEWALK: ClassId = 1;
pub const BUILDING: ClassId = 2;
pub const WALL: ClassId = 3;
pub const FENCE: ClassId = 4;
pub const POLE: ClassId = 5;
pub const TRAFFIC_LIGHT: ClassId = 6;
pub const TRAFFIC_SIGN: ClassId = 7;
pub const VEGETATION: ClassId = 8;
pub const TERRAIN: ClassId = 9;
pub const SKY: ClassId = 10;
pub const PERSON: ClassId = 11;
pub const RIDER: ClassId = 12;
pub const CAR: ClassId = 13;
pub const TRUCK: ClassId = 14;
pub const BUS: ClassId = 15;
pub const TRAIN: ClassId = 16;
pub const MOTORCYCLE: ClassId = 17;
pub const BICYCLE: ClassId = 18;

pub const UNLABELED: ClassId = 255;
pub const NUM_CLASSES: usize = 19;

pub const NAMES: [&str; NUM_CLASSES] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Dynamic objects and sky, removed from the map before localization.
pub const DEFAULT_UNSTABLE: [ClassId; 9] = [
    PERSON, RIDER, CAR, TRUCK, BUS, TRAIN, MOTORCYCLE, BICYCLE, SKY,
];

pub fn is_valid(id: ClassId) -> bool {
    (id as usize) < NUM_CLASSES || id == UNLABELED
}

pub fn name(id: ClassId) -> &'static str {
    NAMES.get(id as usize).copied().unwrap_or("unlabeled")
}
