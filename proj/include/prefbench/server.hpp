#pragma once

// HTTP/JSON front of the elicitation service.
//
//   POST /sessions                  {"condition", "replacement_of"?}
//   GET  /sessions/{id}/next        bearer token
//   POST /sessions/{id}/responses   bearer token
//   POST /sessions/{id}/survey      bearer token
//   GET  /sessions/{id}             bearer token
//   GET  /conditions/{c}/export     JSONL; ?include_same=true adds "same"
//   GET  /conditions/{c}/sidecar    non-strict responses
//   GET  /healthz

#include <string>

#include "httplib.h"
#include "json.hpp"
#include "prefbench/elicitation.hpp"

namespace prefbench {

namespace detail {

inline int http_status(ServiceError::Kind k) {
  switch (k) {
    case ServiceError::Kind::kBadRequest: return 400;
    case ServiceError::Kind::kUnauthorized: return 401;
    case ServiceError::Kind::kNotFound: return 404;
    case ServiceError::Kind::kConflict: return 409;
  }
  return 500;
}

inline void send_json(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline std::string bearer(const httplib::Request& req) {
  const std::string h = req.get_header_value("Authorization");
  const std::string prefix = "Bearer ";
  return h.rfind(prefix, 0) == 0 ? h.substr(prefix.size()) : std::string();
}

inline Json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return Json::object();
  try {
    return Json::parse(req.body);
  } catch (const Json::parse_error& e) {
    throw ServiceError(ServiceError::Kind::kBadRequest, std::string("invalid JSON body: ") + e.what());
  }
}

template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ServiceError& e) {
      send_json(res, http_status(e.kind()), {{"error", e.what()}});
    } catch (const Json::exception& e) {
      send_json(res, 400, {{"error", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", e.what()}});
    }
  };
}

}  // namespace detail

inline void install_routes(httplib::Server& server, ElicitationService& service) {
  using detail::guarded;
  using detail::send_json;

  server.Get("/healthz", guarded([](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}});
  }));

  server.Post("/sessions", guarded([&service](const httplib::Request& req, httplib::Response& res) {
    const Json body = detail::parse_body(req);
    if (!body.contains("condition") || !body.at("condition").is_string()) {
      throw ServiceError(ServiceError::Kind::kBadRequest, "missing condition");
    }
    std::optional<std::string> rep;
    if (body.contains("replacement_of") && !body.at("replacement_of").is_null()) {
      rep = body.at("replacement_of").get<std::string>();
    }
    send_json(res, 201, service.create_session(body.at("condition").get<std::string>(), rep));
  }));

  const auto authed = [&service](const httplib::Request& req) {
    const std::string id = req.matches[1];
    service.authorize(id, detail::bearer(req));
    return id;
  };

  server.Get(R"(/sessions/([^/]+)/next)",
             guarded([&service, authed](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, service.next_item(authed(req)));
             }));

  server.Get(R"(/sessions/([^/]+))",
             guarded([&service, authed](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, service.session_state(authed(req)));
             }));

  server.Post(R"(/sessions/([^/]+)/responses)",
              guarded([&service, authed](const httplib::Request& req, httplib::Response& res) {
                const std::string id = authed(req);
                send_json(res, 200, service.submit_response(id, detail::parse_body(req)));
              }));

  server.Post(R"(/sessions/([^/]+)/survey)",
              guarded([&service, authed](const httplib::Request& req, httplib::Response& res) {
                const std::string id = authed(req);
                send_json(res, 200, service.submit_survey(id, detail::parse_body(req)));
              }));

  server.Get(R"(/conditions/([^/]+)/export)",
             guarded([&service](const httplib::Request& req, httplib::Response& res) {
               const bool same = req.get_param_value("include_same") == "true";
               const PreferenceDataset d = service.export_condition(req.matches[1], same);
               res.status = 200;
               res.set_content(write_dataset(d), "application/x-ndjson");
             }));

  server.Get(R"(/conditions/([^/]+)/sidecar)",
             guarded([&service](const httplib::Request& req, httplib::Response& res) {
               send_json(res, 200, service.export_sidecar(req.matches[1]));
             }));
}

}  // namespace prefbench
