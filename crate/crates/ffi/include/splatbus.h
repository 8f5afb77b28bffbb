#ifndef SPLATBUS_H
#define SPLATBUS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum SbStatus {
  SB_STATUS_OK = 0,
  /**
   * A null pointer, bad length or out-of-range value was passed.
   */
  SB_STATUS_INVALID_ARGUMENT = 1,
  /**
   * The server configuration was rejected.
   */
  SB_STATUS_CONFIG = 2,
  /**
   * The scene asset could not be loaded.
   */
  SB_STATUS_ASSET = 3,
  /**
   * A socket could not be bound, connected, read or written.
   */
  SB_STATUS_NETWORK = 4,
  /**
   * The peer speaks another protocol version.
   */
  SB_STATUS_VERSION_MISMATCH = 5,
  /**
   * The peer sent something unexpected or refused the connection.
   */
  SB_STATUS_PROTOCOL = 6,
  /**
   * The frame region could not be created or attached.
   */
  SB_STATUS_REGION = 7,
  /**
   * Image dimensions do not match the frame region.
   */
  SB_STATUS_DIMENSION_MISMATCH = 8,
  /**
   * The other end has gone away.
   */
  SB_STATUS_DISCONNECTED = 9,
  /**
   * No new frame was available in time.
   */
  SB_STATUS_NO_FRAME = 10,
  /**
   * A depth value was negative or not finite.
   */
  SB_STATUS_MALFORMED_DEPTH = 11,
  /**
   * An unexpected internal failure.
   */
  SB_STATUS_INTERNAL = 12,
} SbStatus;

typedef enum SbTransport {
  SB_TRANSPORT_SHARED_MEMORY = 0,
  SB_TRANSPORT_INPROCESS = 1,
} SbTransport;

typedef enum SbConvention {
  /**
   * Left-handed, +Y up, +Z forward.
   */
  SB_CONVENTION_UNITY_LH_YUP = 0,
  /**
   * Right-handed, +Y down, +Z forward.
   */
  SB_CONVENTION_GS_RH_YDOWN = 1,
} SbConvention;

/**
 * Opaque client handle.
 */
typedef struct SbClient SbClient;

/**
 * Opaque server handle.
 */
typedef struct SbServer SbServer;

/**
 * Server settings. Fill with [`sb_server_config_default`] first.
 */
typedef struct SbServerConfig {
  uint32_t width;
  uint32_t height;
  /**
   * 0 picks an ephemeral port; query it with [`sb_server_ports`].
   */
  uint16_t init_port;
  uint16_t message_port;
  enum SbTransport transport;
  float far_sentinel;
  double default_fov_y_deg;
  uint32_t max_clients;
  /**
   * Nonzero stamps per-frame checksums into the region header.
   */
  uint8_t stamp_checksums;
} SbServerConfig;

/**
 * What one [`sb_server_poll`] call applied.
 */
typedef struct SbUpdateSummary {
  uint32_t camera_messages;
  /**
   * Nonzero when a new camera pose was applied.
   */
  uint8_t camera_applied;
  uint32_t object_messages;
  uint32_t rejected;
} SbUpdateSummary;

/**
 * The renderer camera. `world_to_camera` is row-major.
 */
typedef struct SbCamera {
  double world_to_camera[16];
  double fov_y;
  double fx;
  double fy;
  double cx;
  double cy;
  uint32_t width;
  uint32_t height;
} SbCamera;

typedef struct SbFrameInfo {
  uint32_t width;
  uint32_t height;
  enum SbTransport transport;
} SbFrameInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Protocol version spoken by this library.
 */
uint32_t sb_protocol_version(void);

/**
 * Description of the last error on this thread. Valid until the next call
 * into the library from the same thread; empty if nothing failed yet.
 */
const char *sb_last_error_message(void);

/**
 * Writes the default configuration (800x600, ports 7420/7421, shared
 * memory, 60 degree fov).
 */
enum SbStatus sb_server_config_default(struct SbServerConfig *config);

/**
 * Creates the frame region and starts listening. On success `*out` owns a
 * server to be released with [`sb_server_free`].
 */
enum SbStatus sb_server_start(const struct SbServerConfig *config, struct SbServer **out);

/**
 * Ports the server actually listens on.
 */
enum SbStatus sb_server_ports(const struct SbServer *server,
                              uint16_t *init_port,
                              uint16_t *message_port);

/**
 * Applies pending client messages. Call once per frame from the render
 * loop. `summary` may be null.
 */
enum SbStatus sb_server_poll(struct SbServer *server, struct SbUpdateSummary *summary);

/**
 * The camera to render with, after the last poll.
 */
enum SbStatus sb_server_camera(const struct SbServer *server, struct SbCamera *camera);

/**
 * Publishes a frame. `color` holds `width * height` premultiplied RGBA
 * float pixels, row-major without padding; `invdepth` holds `width *
 * height` inverse depths (0 for background). `frame_index` may be null.
 */
enum SbStatus sb_server_publish(struct SbServer *server,
                                const float *color,
                                const float *invdepth,
                                uint32_t width,
                                uint32_t height,
                                uint64_t *frame_index);

/**
 * Sends a telemetry sample to connected clients.
 */
enum SbStatus sb_server_emit_telemetry(const struct SbServer *server,
                                       const char *series,
                                       double value);

/**
 * Disconnects clients, tears the region down and frees the handle. Null
 * is ignored.
 */
void sb_server_free(struct SbServer *server);

/**
 * Performs the handshake, attaches the frame region and opens the message
 * channel. On success `*out` owns a client to be released with
 * [`sb_client_free`].
 */
enum SbStatus sb_client_connect(const char *host,
                                uint16_t init_port,
                                uint16_t message_port,
                                struct SbClient **out);

enum SbStatus sb_client_info(const struct SbClient *client, struct SbFrameInfo *info);

/**
 * Copies the newest frame into caller buffers of `color_len` floats (at
 * least `4 * width * height`) and `depth_len` floats (at least `width *
 * height`, linear depth). `wait_ms` 0 returns at once, a positive value
 * waits that long for a frame newer than the last one returned. Returns
 * [`SbStatus::NoFrame`] when none arrived. `frame_index` and
 * `timestamp_ns` may be null.
 */
enum SbStatus sb_client_grab(struct SbClient *client,
                             uint32_t wait_ms,
                             float *color,
                             size_t color_len,
                             float *depth,
                             size_t depth_len,
                             uint64_t *frame_index,
                             uint64_t *timestamp_ns);

/**
 * Sends a camera pose. `position` points to 3 doubles, `rotation` to an
 * (x, y, z, w) quaternion. A non-positive `fov_y_deg` leaves the field of
 * view to the server default.
 */
enum SbStatus sb_client_send_camera(const struct SbClient *client,
                                    const double *position,
                                    const double *rotation,
                                    enum SbConvention convention,
                                    double fov_y_deg);

/**
 * Sends an object pose with a uniform scale.
 */
enum SbStatus sb_client_send_object(const struct SbClient *client,
                                    const char *object_id,
                                    const double *position,
                                    const double *rotation,
                                    enum SbConvention convention,
                                    double scale);

/**
 * Closes the session and frees the handle. Null is ignored.
 */
void sb_client_free(struct SbClient *client);

/**
 * Converts `count` inverse depths to linear depth; values at or below
 * 1e-12 become `far_sentinel`. `input` and `output` may alias.
 */
enum SbStatus sb_invdepth_to_linear(const float *input,
                                    float *output,
                                    size_t count,
                                    float far_sentinel);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPLATBUS_H */
