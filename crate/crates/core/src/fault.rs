//! Deliberate corruption switches used to check that verification fails
//! when a formula is wrong. Compiled only with the `fault-hooks` feature.

use core::sync::atomic::{AtomicBool, Ordering};

static GAMMA_SIGN_FLIP: AtomicBool = AtomicBool::new(false);

/// Replaces `√ᾱ_s − √(β̄_s−λ²)·√(ᾱ_t/β̄_t)` by the sum of the two terms.
pub fn set_gamma_sign_flip(on: bool) {
    GAMMA_SIGN_FLIP.store(on, Ordering::SeqCst);
}

pub fn gamma_sign_flipped() -> bool {
    GAMMA_SIGN_FLIP.load(Ordering::SeqCst)
}
