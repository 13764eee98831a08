use super::LabelMap;

/// 1-based indices of the noisy and water-absorption bands dropped from the
/// 220-band Indian Pines scene.
pub const INDIAN_PINES_NOISY_BANDS: &str = "104-108,150-163,220";

/// Published per-class training and test counts of a benchmark split.
#[derive(Clone, Copy, Debug)]
pub struct SplitTable {
    pub name: &'static str,
    /// `(class name, training pixels, test pixels)` in class-id order.
    pub classes: &'static [(&'static str, usize, usize)],
}

impl SplitTable {
    pub fn totals(&self) -> (usize, usize) {
        self.classes.iter().fold((0, 0), |(a, b), (_, tr, te)| (a + tr, b + te))
    }

    pub fn by_name(name: &str) -> Option<&'static SplitTable> {
        [&INDIAN_PINES, &PAVIA_UNIVERSITY, &HOUSTON_2013].into_iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }
}

pub const INDIAN_PINES: SplitTable = SplitTable {
    name: "indian_pines",
    classes: &[
        ("Alfalfa", 15, 39),
        ("Corn-notill", 50, 1384),
        ("Corn-mintill", 50, 784),
        ("Corn", 50, 184),
        ("Grass-pasture", 50, 447),
        ("Grass-trees", 50, 697),
        ("Grass-pasture-mowed", 15, 11),
        ("Hay-windrowed", 50, 439),
        ("Oats", 15, 5),
        ("Soybean-notill", 50, 918),
        ("Soybean-mintill", 50, 2418),
        ("Soybean-clean", 50, 564),
        ("Wheat", 50, 162),
        ("Woods", 50, 1244),
        ("Buildings-Grass-Trees-Drives", 50, 330),
        ("Stone-Steel-Towers", 50, 45),
    ],
};

pub const PAVIA_UNIVERSITY: SplitTable = SplitTable {
    name: "pavia_university",
    classes: &[
        ("Asphalt", 548, 6631),
        ("Meadows", 540, 18649),
        ("Gravel", 392, 2099),
        ("Trees", 524, 3064),
        ("Metal sheets", 265, 1345),
        ("Bare soil", 532, 5029),
        ("Bitumen", 375, 1330),
        ("Bricks", 514, 3682),
        ("Shadows", 231, 947),
    ],
};

pub const HOUSTON_2013: SplitTable = SplitTable {
    name: "houston_2013",
    classes: &[
        ("Healthy grass", 198, 1053),
        ("Stressed grass", 190, 1064),
        ("Synthetic grass", 192, 505),
        ("Trees", 188, 1056),
        ("Soil", 186, 1056),
        ("Water", 182, 143),
        ("Residential", 196, 1072),
        ("Commercial", 191, 1053),
        ("Road", 193, 1059),
        ("Highway", 191, 1036),
        ("Railway", 181, 1054),
        ("Parking lot 1", 192, 1041),
        ("Parking lot 2", 184, 285),
        ("Tennis court", 181, 247),
        ("Running track", 187, 473),
    ],
};

/// Lines describing every class whose split counts differ from the table.
/// Empty when the split matches exactly.
pub fn compare_with_table(labels: &LabelMap, table: &SplitTable) -> Vec<String> {
    let counts = labels.split_counts();
    let mut out = Vec::new();
    if counts.len() != table.classes.len() {
        out.push(format!(
            "{} classes in the labels, {} in the {} table",
            counts.len(),
            table.classes.len(),
            table.name
        ));
    }
    for (c, ((name, tr, te), got)) in table.classes.iter().zip(&counts).enumerate() {
        if (*tr, *te) != *got {
            out.push(format!("class {} ({name}): train/test {}/{} vs table {tr}/{te}", c + 1, got.0, got.1));
        }
    }
    out
}
