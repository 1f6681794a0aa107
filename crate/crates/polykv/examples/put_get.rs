//! Smallest possible end-to-end use: start a single-threaded server on a
//! unix socket, PUT a value, GET it back, DELETE it, and shut down.
//!
//! ```text
//! cargo run --example put_get
//! ```

use polykv::client::BlockingClient;
use polykv::engine::{serve, ModelConfig, ServerConfig};
use polykv::netio::Endpoint;

fn main() {
    let path = std::env::temp_dir().join(format!("kv-demo-{}.sock", std::process::id()));
    let endpoint = Endpoint::Unix(path);

    let handle = serve(ServerConfig::new(ModelConfig::sped(), endpoint.clone()))
        .expect("server starts");
    println!("serving on {endpoint} ({})", handle.topology().describe());

    let mut client = BlockingClient::connect(&endpoint).expect("client connects");
    client.put(b"greeting", b"hello, cache").expect("put succeeds");

    let value = client.get(b"greeting").expect("get succeeds");
    println!("greeting = {:?}", String::from_utf8_lossy(&value.expect("key present")));

    assert!(client.delete(b"greeting").expect("delete succeeds"));
    assert!(client.get(b"greeting").expect("second get succeeds").is_none());
    println!("deleted; key is gone");

    drop(client);
    handle.shutdown().expect("clean shutdown");
    println!("server drained and stopped");
}
