#pragma once

// httplib binding for service::Service.

#include <string>

#include "httplib.h"
#include "wmlab/service.hpp"

namespace wmlab::service {

// Routes every request through Service::handle. CORS is open so the browser UI
// can be served from another origin.
inline void bind_routes(httplib::Server& server, Service& service) {
  auto forward = [&service](const httplib::Request& req, httplib::Response& res) {
    const Response r = service.handle(req.method, req.path, req.body);
    res.status = r.status;
    res.set_content(r.body, "application/json");
  };
  server.Get(".*", forward);
  server.Post(".*", forward);
  server.Options(".*", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                              {"Access-Control-Allow-Headers", "Content-Type"},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
}

// Blocks until the server stops. Returns false when the address cannot be bound.
inline bool serve(Service& service, const std::string& host, int port) {
  httplib::Server server;
  bind_routes(server, service);
  return server.listen(host, port);
}

}  // namespace wmlab::service
