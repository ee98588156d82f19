//! Generates the default classification and generation suites and the
//! sentinel-tagged disjoint suite, and prints a few examples of each.

use mergeforge::tasks::{
    default_classification_suite, default_generation_suite, make_disjoint_suite, Split,
    SplitSizes,
};

fn main() -> mergeforge::Result<()> {
    let sizes = SplitSizes::default();
    let mut all = default_classification_suite(sizes, 0)?;
    all.extend(default_generation_suite(sizes, 0)?);
    all.extend(make_disjoint_suite(3, 0)?);
    for task in &all {
        println!(
            "== {} ({:?}, {} train / {} validation / {} test)",
            task.task_id,
            task.metric(),
            task.splits.train.len(),
            task.splits.validation.len(),
            task.splits.test.len()
        );
        for e in task.split(Split::Test).take(2) {
            println!("{}{}", e.prompt, e.answer);
        }
    }
    Ok(())
}
