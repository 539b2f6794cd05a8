//! Loewner/SLE₄ flows coupled to rank-one isomonodromic deformations of 2×2 Lax systems.

pub mod algebra;
pub mod isomonodromy;
pub mod loewner;
pub mod numerics;
pub mod martingale;
pub mod confluence;
pub mod verify;
