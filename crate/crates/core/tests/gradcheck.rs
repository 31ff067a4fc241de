mod common;

use adaptmatch::model::{ConfigKind, ParamRole};
use common::gradcheck::{assert_all_close, batch, check_model, prepared, Loss};

#[test]
fn task_only_classification_gradients() {
    let m = prepared(ConfigKind::TaskOnly);
    let b = batch(m.config(), 1);
    let r = check_model(&m, &b, Loss::Classify);
    assert_all_close(&r, &["down.weight", "down.bias", "up.weight", "up.bias", "head."]);
}

#[test]
fn pretrained_plus_task_gradients() {
    let m = prepared(ConfigKind::PretrainedPlusTask);
    let b = batch(m.config(), 2);
    let r = check_model(&m, &b, Loss::Classify);
    assert!(r.iter().all(|(n, _)| !n.contains(".adapter.pretrained.")));
    assert_all_close(&r, &[".adapter.task.down.weight", ".adapter.task.up.bias", "head."]);
}

#[test]
fn invertible_gradients_on_both_paths() {
    let m = prepared(ConfigKind::InvertiblePlusTask);
    let b = batch(m.config(), 3);
    let r = check_model(&m, &b, Loss::Classify);
    assert_all_close(&r, &["invertible.", "head.", "up.weight"]);

    let mut mlm = m.clone();
    for id in mlm.trainable_ids() {
        if mlm.role(id) != ParamRole::Invertible {
            mlm.set_frozen(id, true);
        }
    }
    let r = check_model(&mlm, &b, Loss::Mlm);
    assert_all_close(&r, &["invertible."]);
}
