use bccnn::gradcheck::{suites, DEFAULT_TOLERANCE};

fn assert_all_pass(reports: &[bccnn::gradcheck::GroupReport]) {
    for r in reports {
        println!("{r}");
    }
    for r in reports {
        assert!(r.passed(DEFAULT_TOLERANCE), "gradient check failed: {r}");
    }
}

#[test]
fn encoder_tower_gradients() {
    for seed in [1, 2, 3] {
        assert_all_pass(&suites::encoder(seed));
    }
}

#[test]
fn bilingual_objective_gradients() {
    for seed in [1, 2] {
        assert_all_pass(&suites::bilingual(seed));
    }
}

#[test]
fn joint_model_gradients() {
    for seed in [1, 2, 3] {
        let reports = suites::joint(seed);
        assert!(reports.iter().any(|r| r.name.ends_with("sentence_vector") && r.checked == 5));
        assert_all_pass(&reports);
    }
}
