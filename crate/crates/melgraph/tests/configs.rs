//! The shipped model configs parse, validate, and land on the parameter
//! budgets their headers promise.

use std::fs;

use melgraph::nn::{parse_model_config, ModelConfig};

fn load(name: &str) -> ModelConfig {
    let path = format!("{}/configs/{name}.toml", env!("CARGO_MANIFEST_DIR"));
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {path}: {e}"));
    parse_model_config(&text).unwrap_or_else(|e| panic!("parse {path}: {e}"))
}

#[test]
fn toy_config_matches_hand_count() {
    let cfg = load("cnn6-toy");
    assert_eq!(cfg.fc1_dim(), 64);
    assert_eq!(cfg.fc2_dim(), 32);

    // Shapes by hand: 40x64 input, stride-2 convs give 20x32 then 10x16,
    // the 2x2 pool gives 5x8 over 8 channels, so flatten is 320.
    //   conv1: 4*(1*3*3) + 4    =    40
    //   conv2: 8*(4*3*3) + 8    =   296
    //   dense 320 -> 64         = 20544
    //   dense 64 -> 32          =  2080
    //   dense 32 -> 7           =   231
    let by_hand = 40 + 296 + 20544 + 2080 + 231;
    assert_eq!(cfg.param_count().unwrap(), by_hand);
    assert_eq!(by_hand, 23_191);
}

#[test]
fn full_scale_configs_hit_their_size_class() {
    // The big stacks exist for size documentation, not CPU training. Each
    // must land within 1% of the scale its family is cited at.
    for (name, cited) in [
        ("vgg15", 14_860_000.0),
        ("resnet9", 4_960_000.0),
        ("cnn6", 4_440_000.0),
    ] {
        let cfg = load(name);
        let count = cfg.param_count().unwrap() as f64;
        let rel = (count - cited).abs() / cited;
        assert!(
            rel < 0.01,
            "{name}: {count} params is {:.2}% away from {cited}",
            rel * 100.0
        );
        assert_eq!(cfg.classes, 7, "{name} should be a 7-way classifier");
    }
}

#[test]
fn config_headers_state_true_counts() {
    // Each config's leading comment quotes its own parameter count; keep
    // the prose honest.
    for name in ["vgg15", "resnet9", "cnn6", "cnn6-toy"] {
        let path = format!("{}/configs/{name}.toml", env!("CARGO_MANIFEST_DIR"));
        let text = fs::read_to_string(&path).unwrap();
        let count = load(name).param_count().unwrap();
        let with_commas = {
            let s = count.to_string();
            let mut out = String::new();
            for (i, c) in s.chars().enumerate() {
                if i > 0 && (s.len() - i) % 3 == 0 {
                    out.push(',');
                }
                out.push(c);
            }
            out
        };
        assert!(
            text.contains(&with_commas),
            "{name}.toml header does not mention {with_commas}"
        );
    }
}
