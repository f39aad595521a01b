pub mod gradcheck;
pub mod scenes;
