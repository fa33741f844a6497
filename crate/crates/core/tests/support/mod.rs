//! Helpers shared by the integration and acceptance targets.

use std::path::PathBuf;

use tempofeat::data::{
    fit_encoding, impute_age_cat, is_missing, load_dataset, one_hot, CatColumn, DataPaths,
    Dataset, ACTIVITY_CAT_COLUMNS,
};
use tempofeat::features::{assemble, FeatureSetId};

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/missing")
}

pub fn load_fixture() -> Dataset {
    load_dataset(&DataPaths::in_dir(fixture_dir())).expect("fixture loads")
}

/// Every missing-value rule checked against the fixture; each entry is a
/// description and whether it held.
pub fn missing_fixture_checks() -> Vec<(String, bool)> {
    let mut out: Vec<(String, bool)> = Vec::new();
    let mut check = |what: &str, ok: bool| out.push((what.to_owned(), ok));
    let ds = load_fixture();
    let u = |id: u64| ds.users.iter().find(|u| u.user_id == id).unwrap();

    check("missing field count", ds.report.missing_values == 39);
    check("missing geo rows", ds.report.missing_geo_rows == 3);

    let u4 = u(4);
    check("user age_cat parsed as missing", is_missing(&u4.age_cat));
    check("user loc_cat parsed as missing", is_missing(&u4.loc_cat));
    check("user coordinates zero-filled", u4.geo.x == 0.0 && u4.geo.y == 0.0);
    check("monthly flags zero-filled", u4.cc_months == [0; 6] && u4.wealth_months == [0; 6]);
    check("missing target means unlabeled", u4.task2_label.is_none());
    let u5 = u(5);
    check("partial user row", u5.geo.x == 0.0 && u5.geo.y == 6.0);
    check("partial monthly flags", u5.cc_months == [1, 1, 1, 1, 1, 0] && u5.wealth_months == [0; 6]);
    check("present labels kept", u5.task2_label == Some(1) && u(2).task2_label == Some(0));

    let all_missing = ds.activities[1].clone();
    let all_missing = &all_missing;
    check(
        "every activity category parsed as missing",
        ACTIVITY_CAT_COLUMNS.iter().all(|c| is_missing(c.event_value(all_missing))),
    );
    check(
        "activity coordinates zero-filled",
        all_missing.geo.x == 0.0 && all_missing.geo.y == 0.0 && all_missing.geo_missing,
    );
    check("one coordinate missing", ds.activities[2].geo.y == 0.0 && ds.activities[2].geo.x == 3.0);
    check(
        "branch coordinates zero-filled",
        ds.branches[1].geo.x == 0.0 && ds.branches[1].geo.y == 5.0 && ds.branches[2].geo.y == 0.0,
    );
    let visits = ds.visits.as_ref().unwrap();
    check("missing visit count is zero", visits[1].visits == 0);

    let users = impute_age_cat(ds.users.clone()).unwrap();
    let ages: Vec<&str> = users.iter().map(|u| &*u.age_cat).collect();
    check("age imputed with the modal category", ages == ["a", "a", "b", "a", "a"]);
    check("other user categories untouched", is_missing(&users[3].loc_cat));

    let ds = Dataset { users, ..ds.clone() };
    let enc = fit_encoding(&ds).unwrap();
    for col in ACTIVITY_CAT_COLUMNS {
        let block = enc.column(col);
        let start: usize = ACTIVITY_CAT_COLUMNS
            .iter()
            .take_while(|c| **c != col)
            .map(|c| enc.column(*c).len())
            .sum();
        let v = one_hot(all_missing, &enc).unwrap();
        let expect: Vec<f64> = (0..block.len()).map(|i| f64::from(u8::from(i == 0))).collect();
        check(
            &format!("{} missing maps to the MISSING code", col.name()),
            block.code(tempofeat::data::MISSING) == Some(0) && v[start..start + block.len()] == expect[..],
        );
    }
    let v = one_hot(all_missing, &enc).unwrap();
    check("one-hot coordinates zero", v[v.len() - 2..] == [0.0, 0.0]);

    let fm = assemble(FeatureSetId::FS1, &ds, &enc, None).unwrap();
    let col = |name: &str| {
        fm.manifest
            .materialized()
            .position(|c| c.name == name)
            .unwrap_or_else(|| panic!("no column {name}"))
    };
    let row4 = fm.values.row(3);
    check(
        "imputed age one-hot",
        row4[col("age_cat=a")] == 1.0 && row4[col("age_cat=MISSING")] == 0.0 && row4[col("age_cat=b")] == 0.0,
    );
    check(
        "missing user location one-hot",
        row4[col("user_loc_cat=MISSING")] == 1.0 && row4[col("user_loc_cat=r1")] == 0.0,
    );
    check("user coordinates in features", row4[col("user_geo_x")] == 0.0 && row4[col("user_geo_y")] == 0.0);
    check(
        "event categories in features",
        row4[col("mean:channel=MISSING")] == 1.0
            && row4[col("mean:amt_cat=MISSING")] == 1.0
            && row4[col("mean:card=debit")] == 1.0,
    );
    let row1 = fm.values.row(0);
    check(
        "mean activity over a missing event",
        row1[col("mean:time_slot=a")] == 0.5
            && row1[col("mean:time_slot=MISSING")] == 0.5
            && row1[col("mean:geo_x")] == 5.0,
    );
    check("MISSING is every column's first code", enc.column(CatColumn::AgeCat).tokens[0] == tempofeat::data::MISSING);
    out
}
