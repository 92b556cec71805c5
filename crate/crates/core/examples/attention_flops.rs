//! Attention cost per token of the windowed encoder as sequences grow.

use pulse_icu::encoder::{flop_profile, Encoder, EncoderConfig};
use pulse_icu::numerics::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = EncoderConfig {
        max_tokens: 1024,
        ..EncoderConfig::desk()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = Encoder::new(&mut store, cfg, &mut rng)?;
    println!(
        "{:>6} {:>14} {:>14} {:>12}",
        "tokens", "attention", "matmul", "attn/token"
    );
    for row in flop_profile(&encoder, &store, &[32, 64, 128, 256, 512, 1024], &mut rng)? {
        println!(
            "{:>6} {:>14} {:>14} {:>12.0}",
            row.tokens,
            row.attention_flops,
            row.matmul_flops,
            row.attention_per_token()
        );
    }
    Ok(())
}
