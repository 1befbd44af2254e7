/* C interface for the lfm-forge model runtime.
 *
 * All functions returning int give 0 on success and a nonzero error code
 * otherwise; lfm_last_error_message() describes the most recent failure on
 * the calling thread. Handles are opaque and must be released with the
 * matching *_free function. A session must not outlive its model, and each
 * session may only be used from one thread at a time.
 */

#ifndef LFM_FORGE_H
#define LFM_FORGE_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

enum {
  LFM_OK = 0,
  LFM_ERR_DIMENSION = 1,
  LFM_ERR_CONFIG = 2,
  LFM_ERR_INPUT = 3,
  LFM_ERR_DOMAIN = 4,
  LFM_ERR_NUMERIC = 5,
  LFM_ERR_CAPACITY = 6,
  LFM_ERR_COMPAT = 7,
  LFM_ERR_DEGENERATE = 8,
  LFM_ERR_PARSE = 9,
  LFM_ERR_IO = 10,
  LFM_ERR_NULL = 11,
  LFM_ERR_UTF8 = 12,
};

typedef struct LfmModel LfmModel;
typedef struct LfmSession LfmSession;

const char *lfm_last_error_message(void);

int lfm_model_build(const char *config_json, uint64_t seed, LfmModel **out);
int lfm_model_load(const char *config_path, const char *checkpoint_path,
                   LfmModel **out);
void lfm_model_free(LfmModel *model);
size_t lfm_model_vocab_size(const LfmModel *model);

int lfm_session_new(const LfmModel *model, LfmSession **out);
void lfm_session_free(LfmSession *session);
size_t lfm_session_position(const LfmSession *session);
size_t lfm_session_state_bytes(const LfmSession *session);

/* logits_out must hold vocab_size floats. */
int lfm_prefill(const LfmModel *model, LfmSession *session,
                const uint32_t *tokens, size_t n_tokens, float *logits_out);
int lfm_decode_step(const LfmModel *model, LfmSession *session, uint32_t token,
                    float *logits_out);

#ifdef __cplusplus
}
#endif

#endif /* LFM_FORGE_H */
