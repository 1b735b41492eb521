#include "invar/remote.hpp"

#include <chrono>
#include <thread>

#include "httplib.h"
#include "invar/common.hpp"

namespace invar::remote {

namespace {

struct EndpointParts {
  std::string host_port;  // scheme://host:port
  std::string path;
};

EndpointParts split_endpoint(const std::string& endpoint) {
  std::size_t scheme = endpoint.find("://");
  if (scheme == std::string::npos) {
    throw RemoteProtocolError("endpoint must carry a scheme: " + endpoint);
  }
  std::size_t path_start = endpoint.find('/', scheme + 3);
  if (path_start == std::string::npos) {
    return {endpoint, "/"};
  }
  return {endpoint.substr(0, path_start), endpoint.substr(path_start)};
}

}  // namespace

nlohmann::json post_json(const std::string& endpoint,
                         const nlohmann::json& body, int retries,
                         int backoff_ms) {
  EndpointParts parts = split_endpoint(endpoint);
  std::string payload = body.dump();
  int last_status = 0;
  std::string last_detail;
  for (int attempt = 0; attempt <= retries; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(
          std::chrono::milliseconds(backoff_ms << (attempt - 1)));
    }
    httplib::Client client(parts.host_port);
    client.set_connection_timeout(5, 0);
    client.set_read_timeout(30, 0);
    httplib::Result result =
        client.Post(parts.path, payload, "application/json");
    if (!result) {
      last_status = 0;
      last_detail = httplib::to_string(result.error());
      continue;
    }
    if (result->status >= 500) {
      last_status = result->status;
      last_detail = "server error";
      continue;
    }
    if (result->status != 200) {
      throw RemoteUnavailable(endpoint, result->status, result->body);
    }
    nlohmann::json parsed = nlohmann::json::parse(result->body, nullptr, false);
    if (parsed.is_discarded()) {
      throw RemoteProtocolError("non-JSON response from " + endpoint);
    }
    return parsed;
  }
  throw RemoteUnavailable(endpoint, last_status, last_detail);
}

}  // namespace invar::remote
