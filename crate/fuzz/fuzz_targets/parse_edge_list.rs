#![no_main]

use eqfree::graph::Network;
use libfuzzer_sys::fuzz_target;

fn sorted_edges(net: &Network) -> Vec<(usize, usize)> {
    let mut e: Vec<(usize, usize)> = net.edges().map(|(i, j)| (i.min(j), i.max(j))).collect();
    e.sort_unstable();
    e
}

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(net) = Network::parse_edge_list(text) {
        let again = Network::parse_edge_list(&net.to_edge_list()).expect("round trip");
        assert_eq!(sorted_edges(&net), sorted_edges(&again));
    }
});
