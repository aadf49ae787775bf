pub mod contour;
pub mod events;
pub mod mask;
