use std::path::PathBuf;
use std::sync::OnceLock;

use caes_core::imaging::{
    generate_blob_dataset, split_stratified, train_classifier, ClassifierModel, ClassifierSpec,
    ClassifierTrainConfig, DatasetSplits, ImageDataset,
};

pub const DESK_SEED: u64 = 11;

pub fn desk_dataset() -> &'static ImageDataset {
    static DS: OnceLock<ImageDataset> = OnceLock::new();
    DS.get_or_init(|| generate_blob_dataset(4, 100, 64, DESK_SEED))
}

pub fn desk_splits() -> DatasetSplits {
    split_stratified(desk_dataset(), 0.8, 0.1, DESK_SEED)
}

/// Desk classifier trained with the default recipe, cached on disk across
/// test binaries.
pub fn desk_model() -> &'static (ClassifierModel, f64) {
    static MODEL: OnceLock<(ClassifierModel, f64)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
        let path = dir.join(format!("desk-classifier-{DESK_SEED}.ckpt"));
        let splits = desk_splits();
        let model = match ClassifierModel::load(&path) {
            Ok(m) => m,
            Err(_) => {
                let cfg = ClassifierTrainConfig {
                    seed: DESK_SEED,
                    ..Default::default()
                };
                let t = train_classifier(ClassifierSpec::desk(4), &splits.train, &splits.val, &cfg)
                    .expect("desk training");
                std::fs::create_dir_all(&dir).unwrap();
                t.model.save(&path).unwrap();
                t.model
            }
        };
        let (_, acc) = caes_core::imaging::evaluate_classifier(&model, &splits.val).unwrap();
        (model, acc)
    })
}
