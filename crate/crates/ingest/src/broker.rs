//! A small MQTT 3.1.1 broker for bench and test sessions: QoS 0 and 1, no
//! retained messages, no persistence. Enough to carry gaze traffic on a
//! lab network without installing anything else.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use bytes::BytesMut;
use rumqttc::mqttbytes::v4::{ConnAck, ConnectReturnCode, Packet, PubAck, PubComp, PubRec, Publish, SubAck, SubscribeReasonCode, UnsubAck};
use rumqttc::mqttbytes::{matches, Error as MqttError, QoS};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch};
use tokio::task::{JoinHandle, JoinSet};

const MAX_PACKET: usize = 1 << 20;
/// Messages queued per subscriber before new ones are dropped for it.
const SUBSCRIBER_QUEUE: usize = 4096;

struct Subscriber {
    filters: Vec<(String, QoS)>,
    tx: mpsc::Sender<Publish>,
}

#[derive(Default)]
struct Routes {
    next_id: u64,
    subscribers: HashMap<u64, Subscriber>,
}

impl Routes {
    fn route(&self, publish: &Publish) {
        for sub in self.subscribers.values() {
            let granted = sub.filters.iter().filter(|(f, _)| matches(&publish.topic, f)).map(|(_, q)| *q).max_by_key(|q| *q as u8);
            if let Some(q) = granted {
                let mut copy = publish.clone();
                let offered = publish.qos.min_at_least_once();
                copy.qos = if (q as u8) < (offered as u8) { q } else { offered };
                copy.dup = false;
                copy.retain = false;
                if sub.tx.try_send(copy).is_err() {
                    tracing::warn!(topic = %publish.topic, "subscriber queue full, message dropped");
                }
            }
        }
    }
}

trait CapQos {
    fn min_at_least_once(self) -> QoS;
}

impl CapQos for QoS {
    fn min_at_least_once(self) -> QoS {
        match self {
            QoS::ExactlyOnce => QoS::AtLeastOnce,
            q => q,
        }
    }
}

pub struct Broker {
    addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    join: JoinHandle<()>,
}

impl Broker {
    pub async fn start(addr: SocketAddr) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let (shutdown, rx) = watch::channel(false);
        let join = tokio::spawn(serve(listener, rx));
        tracing::info!(%addr, "mqtt broker listening");
        Ok(Self { addr, shutdown, join })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Close the listener and drop every client connection.
    pub async fn stop(self) {
        let _ = self.shutdown.send(true);
        let _ = self.join.await;
    }
}

async fn serve(listener: TcpListener, mut shutdown: watch::Receiver<bool>) {
    let routes = Arc::new(Mutex::new(Routes::default()));
    let mut connections = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let _ = stream.set_nodelay(true);
                    connections.spawn(connection(stream, peer, routes.clone()));
                }
                Err(e) => tracing::warn!(error = %e, "mqtt accept failed"),
            },
            Some(_) = connections.join_next(), if !connections.is_empty() => {}
            _ = shutdown.changed() => break,
        }
    }
    connections.shutdown().await;
}

async fn connection(mut stream: TcpStream, peer: SocketAddr, routes: Arc<Mutex<Routes>>) {
    let (tx, mut rx) = mpsc::channel::<Publish>(SUBSCRIBER_QUEUE);
    let id = {
        let mut r = routes.lock().expect("routes poisoned");
        r.next_id += 1;
        let id = r.next_id;
        r.subscribers.insert(id, Subscriber { filters: Vec::new(), tx });
        id
    };
    if let Err(e) = session(&mut stream, &mut rx, id, &routes).await {
        tracing::debug!(%peer, error = %e, "mqtt connection closed");
    }
    routes.lock().expect("routes poisoned").subscribers.remove(&id);
}

#[derive(Debug, thiserror::Error)]
enum SessionError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0:?}")]
    Protocol(MqttError),
    #[error("first packet was not CONNECT")]
    NotConnect,
}

async fn session(
    stream: &mut TcpStream,
    outgoing: &mut mpsc::Receiver<Publish>,
    id: u64,
    routes: &Mutex<Routes>,
) -> Result<(), SessionError> {
    let mut inbuf = BytesMut::with_capacity(4096);
    let mut out = BytesMut::with_capacity(4096);
    let mut connected = false;
    let mut pkid: u16 = 0;
    loop {
        tokio::select! {
            n = stream.read_buf(&mut inbuf) => {
                if n? == 0 {
                    return Ok(());
                }
                loop {
                    let packet = match Packet::read(&mut inbuf, MAX_PACKET) {
                        Ok(p) => p,
                        Err(MqttError::InsufficientBytes(_)) => break,
                        Err(e) => return Err(SessionError::Protocol(e)),
                    };
                    let reply = match packet {
                        Packet::Connect(_) => {
                            connected = true;
                            Some(Packet::ConnAck(ConnAck::new(ConnectReturnCode::Success, false)))
                        }
                        _ if !connected => return Err(SessionError::NotConnect),
                        Packet::Subscribe(s) => {
                            let mut r = routes.lock().expect("routes poisoned");
                            let sub = r.subscribers.get_mut(&id).expect("registered");
                            let codes = s
                                .filters
                                .iter()
                                .map(|f| {
                                    let q = f.qos.min_at_least_once();
                                    sub.filters.retain(|(p, _)| p != &f.path);
                                    sub.filters.push((f.path.clone(), q));
                                    SubscribeReasonCode::Success(q)
                                })
                                .collect();
                            Some(Packet::SubAck(SubAck::new(s.pkid, codes)))
                        }
                        Packet::Unsubscribe(u) => {
                            let mut r = routes.lock().expect("routes poisoned");
                            let sub = r.subscribers.get_mut(&id).expect("registered");
                            sub.filters.retain(|(p, _)| !u.topics.contains(p));
                            Some(Packet::UnsubAck(UnsubAck::new(u.pkid)))
                        }
                        Packet::Publish(p) => {
                            routes.lock().expect("routes poisoned").route(&p);
                            match p.qos {
                                QoS::AtMostOnce => None,
                                QoS::AtLeastOnce => Some(Packet::PubAck(PubAck::new(p.pkid))),
                                QoS::ExactlyOnce => Some(Packet::PubRec(PubRec::new(p.pkid))),
                            }
                        }
                        Packet::PubRel(r) => Some(Packet::PubComp(PubComp::new(r.pkid))),
                        Packet::PingReq => Some(Packet::PingResp),
                        Packet::Disconnect => return Ok(()),
                        _ => None,
                    };
                    if let Some(reply) = reply {
                        reply.write(&mut out, MAX_PACKET).map_err(SessionError::Protocol)?;
                    }
                }
                if !out.is_empty() {
                    stream.write_all(&out).await?;
                    out.clear();
                }
            }
            Some(mut publish) = outgoing.recv() => {
                if publish.qos != QoS::AtMostOnce {
                    pkid = pkid % u16::MAX + 1;
                    publish.pkid = pkid;
                } else {
                    publish.pkid = 0;
                }
                Packet::Publish(publish).write(&mut out, MAX_PACKET).map_err(SessionError::Protocol)?;
                stream.write_all(&out).await?;
                out.clear();
            }
        }
    }
}
