pub mod block;
pub mod bounds;
pub mod lti;
pub mod noisyfb;
pub mod relay;
pub mod sim;
