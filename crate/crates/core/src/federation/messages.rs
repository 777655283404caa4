//! Client-to-server messages. These are the only values that cross from a
//! client task to the server.

/// Upload of an FML client: the shared part of its meme model and nothing else.
#[derive(Clone, Debug, PartialEq)]
pub struct MemeUpload<T> {
    pub client: usize,
    pub shared: Vec<T>,
}

/// Upload of a FedAvg or FedProx client.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedUpload<T> {
    pub client: usize,
    pub params: Vec<T>,
    pub samples: usize,
}
