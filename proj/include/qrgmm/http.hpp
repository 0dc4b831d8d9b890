#pragma once

#include "qrgmm/svc.hpp"

namespace httplib {
class Server;
}

namespace qrgmm {

// GET  /health
// POST /models                      -> 201 (synchronous linear fit) or 202 {job_id}
// GET  /jobs/{id}
// GET  /models
// GET  /models/{id}
// POST /models/{id}/samples
// POST /models/{id}/risk-curve
// Every response carries an X-Correlation-Id header; errors also carry it
// in the body.
void mount_routes(httplib::Server& server, Service& service);

// Binds cfg.host:cfg.port and blocks until stop_server() or a signal.
int run_server(Service& service);
void stop_server();

}  // namespace qrgmm
